import math

import numpy as np
import pytest

from plasticnet import autograd as ag
from plasticnet.autograd import Tape
from plasticnet.lm import (EOS, UNK, LMConfig, LMModel, batchify, build_corpus, build_lm,
                           lm_param_count, load_corpus, match_hidden_sizes, perplexity, tokenize,
                           train_lm, train_window, window_nll)
from plasticnet.optim import SGD

VARIANTS = ("none", "plain", "simple-mod", "retro-mod")


def small_model(variant="none", vocab=11, seed=0, sizes=(6, 5)):
    return LMModel(vocab, 4, sizes, variant, np.random.default_rng(seed), init_scale=0.3)


# -- corpus --------------------------------------------------------------------------

def test_word_corpus_example(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("a b a\n")
    corpus = load_corpus(path, "word", fractions=(1.0, 0.0, 0.0))
    assert set(corpus.vocab) == {"a", "b", UNK, EOS}
    assert corpus.vocab[:2] == [UNK, EOS]
    a, b, eos = corpus.stoi["a"], corpus.stoi["b"], corpus.stoi[EOS]
    assert corpus.train.tolist() == [a, b, a, eos]
    again = load_corpus(path, "word", fractions=(1.0, 0.0, 0.0))
    assert again.vocab == corpus.vocab and np.array_equal(again.train, corpus.train)


def test_token_count_is_whitespace_tokens_plus_line_ends():
    text = "the cat  sat\n\non the\tmat .\nend"
    n_ws = sum(len(line.split()) for line in text.splitlines())
    assert len(tokenize(text, "word")) == n_ws + len(text.splitlines())


def test_splits_are_contiguous_and_unknowns_map_to_unk():
    text = "abcabcabcabcabcabcxyz"
    corpus = build_corpus(text, "char", fractions=(0.8, 0.1, 0.1))
    n = len(text)
    assert len(corpus.train) + len(corpus.valid) + len(corpus.test) == n
    assert "x" not in corpus.vocab or text.index("x") < len(corpus.train)
    decoded = "".join(corpus.vocab[i] for i in corpus.train)
    assert decoded == text[:len(corpus.train)]
    assert corpus.test[-1] == corpus.stoi[UNK]


def test_empty_corpus_is_rejected(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("  \n")
    with pytest.raises(ValueError):
        load_corpus(path)


def test_bad_mode():
    with pytest.raises(ValueError):
        tokenize("abc", "byte")


# -- perplexity ----------------------------------------------------------------------

def test_untrained_model_is_close_to_uniform():
    model = small_model(vocab=20)
    ids = np.random.default_rng(0).integers(0, 20, 400)
    assert abs(perplexity(model, ids) / 20 - 1) < 0.05


def test_uniform_predictor_scores_vocab_size():
    model = small_model(vocab=17)
    model.params["proj_w"].data[:] = 0.0
    ids = np.random.default_rng(1).integers(0, 17, 300)
    assert abs(perplexity(model, ids) - 17) <= 1e-9


def test_perfect_predictor_scores_one():
    model = small_model(vocab=9)
    model.params["proj_w"].data[:] = 0.0
    model.params["proj_b"].data[:] = 0.0
    model.params["proj_b"].data[4] = 1e3
    assert perplexity(model, np.full(50, 4)) == 1.0


def two_pass_perplexity(model, ids, segment):
    """exp(mean NLL) from raw logits with an explicit max pass and sum pass."""
    total, count = 0.0, 0
    with ag.no_grad():
        for s in range(0, len(ids) - 1, segment):
            inp = ids[s:min(s + segment, len(ids) - 1)]
            tgt = ids[s + 1:s + 1 + len(inp)]
            logits, _ = model.logits(inp[None, :], model.zero_state(1))
            for row, t in zip(logits.data, tgt):
                m = max(row)
                z = sum(math.exp(v - m) for v in row)
                total += (m + math.log(z)) - row[t]
                count += 1
    return math.exp(total / count)


@pytest.mark.parametrize("variant", VARIANTS)
def test_perplexity_matches_two_pass_oracle(variant):
    model = small_model(variant)
    ids = np.random.default_rng(2).integers(0, 11, 157)
    got = perplexity(model, ids, batch_size=4, segment=30)
    assert abs(got - two_pass_perplexity(model, ids, 30)) <= 1e-9


@pytest.mark.parametrize("variant", VARIANTS)
def test_perplexity_does_not_depend_on_eval_batch(variant):
    model = small_model(variant, seed=3)
    ids = np.random.default_rng(3).integers(0, 11, 413)
    assert abs(perplexity(model, ids, batch_size=1, segment=40) -
               perplexity(model, ids, batch_size=8, segment=40)) <= 1e-6


# -- parameter parity ----------------------------------------------------------------

@pytest.mark.parametrize("variant", ["plain", "simple-mod", "retro-mod"])
@pytest.mark.parametrize("vocab, hidden", [(83, 64), (50, 32), (10_000, 200)])
def test_plastic_configs_match_baseline_within_one_percent(variant, vocab, hidden):
    base = lm_param_count(vocab, 32, (hidden, hidden), "none")
    sizes = match_hidden_sizes(base, vocab, 32, variant, hidden)
    assert abs(sizes[0] - sizes[1]) <= 2
    assert abs(lm_param_count(vocab, 32, sizes, variant) - base) / base < 0.01


def test_built_models_report_matching_counts():
    counts = {}
    for variant in VARIANTS:
        model = build_lm(LMConfig(emb_size=16, hidden_size=48, variant=variant), 60)
        assert model.num_params() == lm_param_count(60, 16, model.hidden_sizes, variant)
        counts[variant] = model.num_params()
    for variant in VARIANTS[1:]:
        assert abs(counts[variant] - counts["none"]) / counts["none"] < 0.01


# -- training mechanics --------------------------------------------------------------

def test_batchify_layout():
    data = batchify(np.arange(10), 3)
    np.testing.assert_array_equal(data, [[0, 1, 2], [3, 4, 5], [6, 7, 8]])
    with pytest.raises(ValueError):
        batchify(np.arange(3), 2)


@pytest.mark.parametrize("variant", VARIANTS)
def test_window_gradients_ignore_tokens_before_the_window(variant):
    """The carried state is detached, so earlier tokens cannot reach the gradient."""
    rng = np.random.default_rng(4)
    window = rng.integers(0, 11, (2, 6))
    targets = rng.integers(0, 11, (2, 6))
    prefix = rng.integers(0, 5, (2, 8))  # ids 0..4 only
    window[window < 5] += 5                # window uses ids 5..10 only
    model = small_model(variant)
    params = model.parameters()

    with Tape():
        _, state = model.log_probs(prefix, model.zero_state(2))
        state = [s._replace(**{k: getattr(s, k).detach() for k in s._fields if getattr(s, k) is not None})
                 for s in state]
        nll, _ = window_nll(model, window, targets, state)
        with_prefix = ag.backward(nll, params)
    for p in params:
        p.grad = None
    with Tape():
        nll, _ = window_nll(model, window, targets, state)
        alone = ag.backward(nll, params)
    for p in params:
        p.grad = None
        np.testing.assert_array_equal(with_prefix[p], alone[p])
    emb_grad = with_prefix[model.params["emb"]]
    assert np.all(emb_grad[:5] == 0) and np.any(emb_grad[5:] != 0)


def test_train_window_returns_detached_state_and_clips():
    model = small_model("retro-mod")
    opt = SGD(model.parameters(), 1.0)
    rng = np.random.default_rng(5)
    nll, norm, state = train_window(model, opt, rng.integers(0, 11, (2, 5)), rng.integers(0, 11, (2, 5)),
                                    model.zero_state(2), grad_clip=1e-3)
    assert np.isfinite(nll) and norm > 0
    for layer in state:
        for t in layer:
            assert t is None or not t.requires_grad


def test_lr_decay_schedule_and_curve(tmp_path):
    corpus = build_corpus("abcd" * 300, "char")
    cfg = LMConfig(emb_size=4, hidden_size=6, epochs=3, batch_size=4, bptt=10, decay_start=2, lr_decay=0.5)
    result = train_lm(cfg, corpus, out_dir=str(tmp_path), tag="x")
    assert [row[0] for row in result.curve] == [1, 2, 3]
    assert [row[3] for row in result.curve] == [1.0, 0.5, 0.25]
    assert (tmp_path / "curve_x.csv").read_text().splitlines()[0] == "epoch,train_ppl,valid_ppl,lr"
    assert (tmp_path / "checkpoint_x.npz").exists()


@pytest.mark.parametrize("variant", VARIANTS)
def test_repeating_corpus_is_memorised_in_one_epoch(variant):
    """A 100-token periodic corpus is fully predictable once the period is seen."""
    corpus = build_corpus("0123456789" * 10, "char", fractions=(1.0, 0.0, 0.0))
    assert len(corpus.train) == 100
    cfg = LMConfig(variant=variant, emb_size=16, hidden_size=32, epochs=1, batch_size=1, bptt=1,
                   init_scale=0.5)
    result = train_lm(cfg, corpus)
    assert perplexity(result.model, corpus.train) < 2.0


def test_divergence_aborts():
    corpus = build_corpus("abcde" * 200, "char")
    cfg = LMConfig(emb_size=4, hidden_size=6, epochs=2, batch_size=4, lr=1e4, grad_clip=1e6, init_scale=2.0)
    from plasticnet.lm import LMDiverged
    with pytest.raises((LMDiverged, FloatingPointError)):
        with np.errstate(all="ignore"):
            train_lm(cfg, corpus)


# -- independent reference: the baseline against a torch implementation ----------------

def test_baseline_loss_trajectory_matches_torch_reference():
    torch = pytest.importorskip("torch")
    vocab, emb, sizes, batch, bptt, steps = 13, 5, (7, 6), 3, 5, 100
    model = LMModel(vocab, emb, sizes, "none", np.random.default_rng(7), init_scale=0.3)
    rng = np.random.default_rng(8)
    data = rng.integers(0, vocab, (batch, bptt * steps + 1))

    tp = {k: torch.tensor(v.data.copy(), dtype=torch.float64, requires_grad=True) for k, v in model.params.items()}

    def torch_window(inputs, targets, state):
        outs = []
        for t in range(inputs.shape[1]):
            x = tp["emb"][torch.as_tensor(inputs[:, t])]
            new_state = []
            for k, (h, c) in enumerate(state):
                n = h.shape[1]
                z = x @ tp[f"l{k}.w_x"] + h @ tp[f"l{k}.w_h"] + tp[f"l{k}.b"]
                i, j = torch.tanh(z[:, :n]), torch.sigmoid(z[:, n:2 * n])
                f, o = torch.sigmoid(z[:, 2 * n:3 * n]), torch.sigmoid(z[:, 3 * n:])
                c = f * c + i * j
                h = torch.tanh(c) * o
                new_state.append((h, c))
                x = h
            state = new_state
            outs.append(x)
        logits = torch.cat(outs) @ tp["proj_w"] + tp["proj_b"]
        tgt = torch.as_tensor(np.ascontiguousarray(targets.T).reshape(-1))
        return torch.nn.functional.cross_entropy(logits, tgt), state

    opt = SGD(model.parameters(), 1.0)
    state = model.zero_state(batch)
    tstate = [(torch.zeros(batch, h, dtype=torch.float64), torch.zeros(batch, h, dtype=torch.float64))
              for h in sizes]
    for step in range(steps):
        s = step * bptt
        inputs, targets = data[:, s:s + bptt], data[:, s + 1:s + bptt + 1]
        ours, _, state = train_window(model, opt, inputs, targets, state, grad_clip=5.0)

        loss, tstate = torch_window(inputs, targets, tstate)
        grads = torch.autograd.grad(loss, list(tp.values()))
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = 5.0 / norm if norm > 5.0 else 1.0
        with torch.no_grad():
            for p, g in zip(tp.values(), grads):
                p -= 1.0 * (g * scale)
        tstate = [(h.detach(), c.detach()) for h, c in tstate]
        assert abs(ours - loss.item()) <= 1e-9, step
