"""Language modelling with stacked (plastic) LSTMs.

Text is tokenized by words or characters, split contiguously into
train/valid/test, and modelled by embedding -> LSTM layers -> softmax.
Training is plain SGD over truncated BPTT windows.  Hidden and Hebbian
states are carried (detached) from one window to the next and reset at
each epoch.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .cells import (canonical_variant, detach_state, init_params, lstm_config, lstm_zero_state,
                    param_count, plastic_lstm_step)
from .checkpoint import save_params
from .optim import SGD, clip_grad_norm

log = logging.getLogger(__name__)

UNK = "<unk>"
EOS = "<eos>"
LM_CURVE_FIELDS = ("epoch", "train_ppl", "valid_ppl", "lr")


class LMDiverged(RuntimeError):
    pass


# -- corpus -------------------------------------------------------------------------

@dataclass
class Corpus:
    vocab: list
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    mode: str = "word"
    stoi: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {tok: i for i, tok in enumerate(self.vocab)}
        n = len(self.vocab)
        for split in (self.train, self.valid, self.test):
            if split.size and (split.min() < 0 or split.max() >= n):
                raise ValueError("token id out of vocabulary range")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def tokenize(text: str, mode: str) -> list:
    if mode == "word":
        tokens = []
        for line in text.splitlines():
            tokens.extend(line.split())
            tokens.append(EOS)
        return tokens
    if mode == "char":
        return list(text)
    raise ValueError(f"mode must be 'word' or 'char', got {mode!r}")


def build_corpus(text: str, mode: str = "word", fractions=(0.9, 0.05, 0.05)) -> Corpus:
    """Tokenize and split; the vocabulary comes from the training split only."""
    tokens = tokenize(text, mode)
    if not tokens or not text.strip():
        raise ValueError("corpus is empty")
    n = len(tokens)
    n_train = max(1, int(n * fractions[0]))
    n_valid = min(n - n_train, int(n * fractions[1]))
    specials = [UNK, EOS] if mode == "word" else [UNK]
    vocab = list(specials)
    seen = set(vocab)
    for tok in tokens[:n_train]:
        if tok not in seen:
            seen.add(tok)
            vocab.append(tok)
    stoi = {tok: i for i, tok in enumerate(vocab)}
    unk = stoi[UNK]
    ids = np.array([stoi.get(tok, unk) for tok in tokens], dtype=np.int64)
    return Corpus(vocab, ids[:n_train], ids[n_train:n_train + n_valid], ids[n_train + n_valid:], mode)


def load_corpus(path, mode: str = "word", fractions=(0.9, 0.05, 0.05)) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise ValueError(f"{path}: corpus file is empty")
    return build_corpus(text, mode, fractions)


# -- model --------------------------------------------------------------------------

def lm_param_count(vocab_size: int, emb_size: int, hidden_sizes, variant: str, **granularity) -> int:
    total = vocab_size * emb_size
    n_in = emb_size
    for h in hidden_sizes:
        total += param_count(lstm_config(n_in, h, variant, **granularity))
        n_in = h
    return total + n_in * vocab_size + vocab_size


def match_hidden_sizes(target: int, vocab_size: int, emb_size: int, variant: str,
                       max_size: int, **granularity) -> tuple:
    """Two layer sizes whose total parameter count is closest to ``target``.

    Layer sizes may differ by at most 2, which gives enough resolution to
    land within a fraction of a percent of the target.
    """
    best = None
    for h1 in range(2, max_size + 1):
        for h2 in range(max(2, h1 - 2), min(max_size, h1 + 2) + 1):
            diff = abs(lm_param_count(vocab_size, emb_size, (h1, h2), variant, **granularity) - target)
            key = (diff, abs(h1 - h2), -h1)
            if best is None or key < best[0]:
                best = (key, (h1, h2))
    return best[1]


class LMModel:
    """Embedding, a stack of (plastic) LSTM layers, softmax projection."""

    def __init__(self, vocab_size: int, emb_size: int, hidden_sizes, variant: str = "none",
                 rng: np.random.Generator | None = None, init_scale: float = 0.1,
                 alpha: str = "per-connection", eta: str = "per-connection",
                 fanout: str = "per-connection"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size = vocab_size
        self.emb_size = emb_size
        self.hidden_sizes = tuple(hidden_sizes)
        self.variant = variant
        self.granularity = {"alpha": alpha, "eta": eta, "fanout": fanout}
        self.params: dict[str, Tensor] = {
            "emb": Tensor(rng.uniform(-init_scale, init_scale, (vocab_size, emb_size)),
                          requires_grad=True, name="emb")}
        self.layer_configs = []
        self.layer_params = []
        n_in = emb_size
        for k, h in enumerate(self.hidden_sizes):
            cfg = lstm_config(n_in, h, variant, alpha, eta, fanout)
            lp = init_params(cfg, rng, init_scale)
            for name, t in lp.items():
                t.name = f"l{k}.{name}"
                self.params[t.name] = t
            self.layer_configs.append(cfg)
            self.layer_params.append(lp)
            n_in = h
        self.params["proj_w"] = Tensor(rng.uniform(-init_scale, init_scale, (n_in, vocab_size)),
                                       requires_grad=True, name="proj_w")
        self.params["proj_b"] = Tensor(np.zeros(vocab_size), requires_grad=True, name="proj_b")

    def parameters(self) -> list:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_state(self, batch: int) -> list:
        return [lstm_zero_state(cfg, batch) for cfg in self.layer_configs]

    def log_probs(self, inputs: np.ndarray, state: list):
        """Run ``inputs[b, t]`` through the stack.

        Returns ``(logp[t*b, vocab], final_state)``; rows are time-major.
        """
        logits, state = self.logits(inputs, state)
        return ag.log_softmax(logits), state

    def logits(self, inputs: np.ndarray, state: list):
        """Unnormalised next-token scores, laid out like :meth:`log_probs`."""
        emb = self.params["emb"]
        tops = []
        state = list(state)
        for t in range(inputs.shape[1]):
            x = ag.getitem(emb, inputs[:, t])
            for k, (cfg, lp) in enumerate(zip(self.layer_configs, self.layer_params)):
                state[k] = plastic_lstm_step(x, state[k], lp, cfg.variant)
                x = state[k].h
            tops.append(x)
        top = ag.concat(tops, axis=0)
        return ag.matmul(top, self.params["proj_w"]) + self.params["proj_b"], state


def window_nll(model: LMModel, inputs: np.ndarray, targets: np.ndarray, state: list):
    """Mean negative log-likelihood over a window and the carried state."""
    logp, state = model.log_probs(inputs, state)
    flat_targets = np.ascontiguousarray(targets.T).reshape(-1)
    nll = -ag.pick(logp, flat_targets).mean()
    return nll, state


def batchify(ids: np.ndarray, batch_size: int) -> np.ndarray:
    n = len(ids) // batch_size
    if n < 2:
        raise ValueError(f"split of {len(ids)} tokens is too short for batch size {batch_size}")
    return ids[:n * batch_size].reshape(batch_size, n)


def train_window(model: LMModel, opt: SGD, inputs, targets, state, grad_clip: float):
    """One truncated-BPTT update; returns ``(nll, grad_norm, detached_state)``."""
    params = model.parameters()
    with Tape():
        nll, state = window_nll(model, inputs, targets, state)
        grads_map = ag.backward(nll, params)
    grads = [grads_map[p] for p in params]
    for p in params:
        p.grad = None
    grads, norm = clip_grad_norm(grads, grad_clip)
    opt.step(grads)
    return nll.item(), norm, [detach_state(s) for s in state]


def _ppl(mean_nll: float) -> float:
    return math.exp(mean_nll) if mean_nll < 700 else math.inf


def perplexity(model: LMModel, ids: np.ndarray, batch_size: int = 8, segment: int = 200) -> float:
    """``exp`` of the mean per-token NLL of ``ids[1:]`` given its prefix.

    The split is cut into independent segments of ``segment`` predictions,
    each scored from a zero state with plastic updates running.  Segments are
    batched only for speed, so the result does not depend on ``batch_size``.
    """
    ids = np.asarray(ids)
    n_pred = len(ids) - 1
    if n_pred < 1:
        raise ValueError("need at least two tokens to score")
    starts = list(range(0, n_pred, segment))
    full = [s for s in starts if s + segment <= n_pred]
    rest = [s for s in starts if s + segment > n_pred]
    total = 0.0
    with ag.no_grad():
        groups = [full[i:i + batch_size] for i in range(0, len(full), batch_size)]
        groups += [[s] for s in rest]
        for group in groups:
            length = min(segment, n_pred - group[0])
            inputs = np.stack([ids[s:s + length] for s in group])
            targets = np.stack([ids[s + 1:s + length + 1] for s in group])
            logp, _ = model.log_probs(inputs, model.zero_state(len(group)))
            flat_targets = targets.T.reshape(-1)
            total -= float(logp.data[np.arange(flat_targets.size), flat_targets].sum())
    return _ppl(total / n_pred)


# -- training loop --------------------------------------------------------------------

@dataclass
class LMConfig:
    corpus: str = ""
    mode: str = "char"
    variant: str = "none"
    emb_size: int = 32
    hidden_size: int = 64
    match_params: bool = True
    epochs: int = 20
    batch_size: int = 32
    bptt: int = 20
    lr: float = 1.0
    lr_decay: float = 0.5
    decay_start: int = 6
    grad_clip: float = 5.0
    l2: float = 0.0
    init_scale: float = 0.1
    eval_batch_size: int = 8
    eval_segment: int = 200
    seed: int = 0


@dataclass
class LMResult:
    model: LMModel
    curve: list
    hidden_sizes: tuple


def build_lm(cfg: LMConfig, vocab_size: int) -> LMModel:
    base = (cfg.hidden_size, cfg.hidden_size)
    sizes = base
    variant = canonical_variant(cfg.variant)
    if variant != "none" and cfg.match_params:
        target = lm_param_count(vocab_size, cfg.emb_size, base, "none")
        sizes = match_hidden_sizes(target, vocab_size, cfg.emb_size, variant, cfg.hidden_size)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    return LMModel(vocab_size, cfg.emb_size, sizes, variant, rng, cfg.init_scale)


def train_lm(cfg: LMConfig, corpus: Corpus | None = None, out_dir: str | None = None,
             tag: str = "lm") -> LMResult:
    """Train for ``cfg.epochs`` epochs; one curve row per epoch.

    The learning rate is multiplied by ``lr_decay`` at the start of every
    epoch from ``decay_start`` on (1-based).  Raises :class:`LMDiverged` if a
    perplexity exceeds ten times the vocabulary size.
    """
    corpus = corpus if corpus is not None else load_corpus(cfg.corpus, cfg.mode)
    model = build_lm(cfg, corpus.vocab_size)
    opt = SGD(model.parameters(), cfg.lr)
    decayed = [p for p in model.parameters() if p.ndim >= 2]
    data = batchify(corpus.train, cfg.batch_size)
    limit = corpus.vocab_size * 10
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        if epoch >= cfg.decay_start:
            opt.lr *= cfg.lr_decay
        state = model.zero_state(cfg.batch_size)
        total, count = 0.0, 0
        for start in range(0, data.shape[1] - 1, cfg.bptt):
            length = min(cfg.bptt, data.shape[1] - 1 - start)
            inputs = data[:, start:start + length]
            targets = data[:, start + 1:start + 1 + length]
            if cfg.l2:
                for p in decayed:
                    p.data *= 1.0 - opt.lr * cfg.l2
            nll, _, state = train_window(model, opt, inputs, targets, state, cfg.grad_clip)
            if not math.isfinite(nll):
                raise LMDiverged(f"non-finite training loss in epoch {epoch}")
            total += nll * length
            count += length
        train_ppl = _ppl(total / count)
        valid = corpus.valid if len(corpus.valid) > 1 else corpus.train
        valid_ppl = perplexity(model, valid, cfg.eval_batch_size, cfg.eval_segment)
        curve.append((epoch, train_ppl, valid_ppl, opt.lr))
        log.info("epoch %d: train ppl %.3f, valid ppl %.3f", epoch, train_ppl, valid_ppl)
        if max(train_ppl, valid_ppl) > limit:
            raise LMDiverged(f"perplexity {max(train_ppl, valid_ppl):.1f} exceeds {limit} in epoch {epoch}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_lm_curve(os.path.join(out_dir, f"curve_{tag}.csv"), curve)
        save_params(os.path.join(out_dir, f"checkpoint_{tag}.npz"), model.params,
                    {"kind": "lm", "vocab_size": corpus.vocab_size, "emb_size": cfg.emb_size,
                     "hidden_sizes": list(model.hidden_sizes), "variant": model.variant})
    return LMResult(model, curve, model.hidden_sizes)


def write_lm_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LM_CURVE_FIELDS)
        for epoch, tr, va, lr in rows:
            w.writerow([epoch, repr(tr), repr(va), repr(lr)])
