"""
Self-checks run by `ecgnat verify`.

Suites:
- oracle: windowed kernel vs dense masked attention, forward and gradients
- gradcheck: tape gradients vs central differences for every primitive,
  the NAT block and the mini-model pretraining / fine-tuning losses
- losses: exact identities of the fine-tuning objective
- metrics: rank AUROC vs pairwise enumeration, F1/accuracy vs hand counts

Everything runs in float64. `level="quick"` uses reduced case counts.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple
from unittest import mock
import itertools
import logging
import math

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from autograd import Tensor, functional as F, gradcheck, no_grad, precision
from evaluation import accuracy, binary_auroc, macro_f1, pairwise_auroc
from models import ECGNAT, ModelConfig, NATBlock
from natten1d import kernel as na_kernel
from training import apply_mask, ce_loss, sample_plans, recon_loss, supcon_loss, total_loss
from utils import ProgressTracker
from utils.error_handling import ConfigurationError

logger = logging.getLogger(__name__)

LEVELS = {
    "quick": {"oracle_cases": 20, "grad_oracle_cases": 5, "identity_cases": 10, "auroc_cases": 20, "max_entries": 12,
              "primitive_trials": 3},
    "full": {"oracle_cases": 200, "grad_oracle_cases": 20, "identity_cases": 50, "auroc_cases": 100, "max_entries": None,
             "primitive_trials": 20},
}
ORACLE_TOL = 1e-12
GRAD_ORACLE_TOL = 1e-10
GRADCHECK_RTOL = 1e-5
IDENTITY_TOL = 1e-9
CE_TOL = 1e-7


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    failures: List[str] = field(default_factory=list)

    def record(self, label: str, ok: bool, detail: str = "") -> None:
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            self.failures.append(f"{label}: {detail}" if detail else label)
            logger.warning(f"[{self.name}] FAILED {label} {detail}")


@dataclass
class VerificationReport:
    level: str
    suites: List[SuiteResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.failed == 0 for s in self.suites)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"suite": s.name, "passed": s.passed, "failed": s.failed} for s in self.suites])

    def format(self) -> str:
        lines = [f"verification level={self.level}"]
        for s in self.suites:
            status = "ok" if s.failed == 0 else "FAIL"
            lines.append(f"  {s.name:<10} passed={s.passed:<4} failed={s.failed:<4} {status}")
            lines.extend(f"      - {f}" for f in s.failures[:10])
        lines.append("PASSED" if self.ok else "FAILED")
        return "\n".join(lines)


# --- oracle ----------------------------------------------------------------

def _random_case(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]:
    n = int(rng.integers(1, 65))
    window = int(rng.choice([1, 3, 5, 7]))
    d = int(rng.integers(1, 17))
    heads = int(rng.integers(1, 5))
    q, k, v = (rng.standard_normal((heads, n, d)) for _ in range(3))
    bias = rng.standard_normal((heads, 2 * window - 1))
    return q, k, v, bias, window


def oracle_suite(settings: Dict, rng: np.random.Generator) -> SuiteResult:
    suite = SuiteResult("oracle")
    for case in range(settings["oracle_cases"]):
        q, k, v, bias, window = _random_case(rng)
        with no_grad():
            dense = na_kernel.na_reference(q, k, v, bias, window).data
        diff = float(np.abs(na_kernel.na_forward(q, k, v, bias, window) - dense).max())
        suite.record(f"forward case {case} n={q.shape[1]} k={window}", diff < ORACLE_TOL, f"max diff {diff:.2e}")

    for case in range(settings["grad_oracle_cases"]):
        q, k, v, bias, window = _random_case(rng)
        weight = rng.standard_normal(q.shape)
        grads = []
        for fn in (na_kernel.neighborhood_attention, na_kernel.na_reference):
            leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in (q, k, v, bias)]
            F.sum(F.mul(fn(*leaves, window), weight)).backward()
            grads.append([t.grad for t in leaves])
        diff = max(float(np.abs(a - b).max()) for a, b in zip(*grads))
        suite.record(f"gradient case {case} n={q.shape[1]} k={window}", diff < GRAD_ORACLE_TOL, f"max diff {diff:.2e}")
    return suite


# --- gradcheck -------------------------------------------------------------

def mini_model_config() -> ModelConfig:
    """Smallest network with two stages, used by gradient checks and tests."""
    return ModelConfig(n_leads=2, input_len=32, embed_dim=4, stage_heads=(1, 2), blocks_per_stage=1,
                       window_k=3, n_classes=2, mlp_ratio=2.0)


def _leaf(rng: np.random.Generator, *shape, positive: bool = False, away_from_zero: bool = False) -> Tensor:
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    elif away_from_zero:
        data = np.sign(data) * (np.abs(data) + 0.1)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, weight: np.ndarray) -> Tensor:
    return F.sum(F.mul(out, Tensor(weight, dtype=np.float64)))


def primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[..., Tensor], List[Tensor]]]:
    """(name, scalar function, inputs) for every differentiable primitive.

    Shapes are drawn from `rng` as well as values, so repeated calls cover
    broadcasting, singleton axes and boundary windows.
    """
    w = lambda *shape: rng.standard_normal(shape)  # noqa: E731
    r, c, p = (int(v) for v in rng.integers(1, 5, size=3))
    c2 = c + 1
    batch, c_in, c_out, length = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), \
        int(rng.integers(3, 11))
    heads, n, d = int(rng.integers(1, 4)), int(rng.integers(1, 11)), int(rng.integers(1, 5))
    window = int(rng.choice([1, 3, 5]))
    idx = rng.integers(0, c, size=c2)
    targets = rng.integers(0, c2, size=r)
    labels = rng.integers(0, 3, size=int(rng.integers(3, 7)))
    labels[1] = labels[0]
    w_rc = w(r, c)
    return [
        ("add", lambda a, b: _weighted(a + b, w_rc), [_leaf(rng, r, c), _leaf(rng, c)]),
        ("sub", lambda a, b: _weighted(a - b, w_rc), [_leaf(rng, r, c), _leaf(rng, r, 1)]),
        ("mul", lambda a, b: _weighted(a * b, w_rc), [_leaf(rng, r, c), _leaf(rng, r, c)]),
        ("div", lambda a, b: _weighted(a / b, w_rc), [_leaf(rng, r, c), _leaf(rng, r, c, positive=True)]),
        ("power", lambda a: _weighted(a ** 3, w_rc), [_leaf(rng, r, c)]),
        ("sqrt", lambda a: _weighted(F.sqrt(a), w_rc), [_leaf(rng, r, c, positive=True)]),
        ("exp", lambda a: _weighted(F.exp(a), w_rc), [_leaf(rng, r, c)]),
        ("log", lambda a: _weighted(F.log(a), w_rc), [_leaf(rng, r, c, positive=True)]),
        ("relu", lambda a: _weighted(F.relu(a), w_rc), [_leaf(rng, r, c, away_from_zero=True)]),
        ("gelu", lambda a: _weighted(F.gelu(a), w_rc), [_leaf(rng, r, c)]),
        ("matmul", lambda a, b: _weighted(a @ b, w(r, p)), [_leaf(rng, r, c), _leaf(rng, c, p)]),
        ("transpose", lambda a: _weighted(F.transpose(a, (1, 0)), w(c, r)), [_leaf(rng, r, c)]),
        ("reshape", lambda a: _weighted(F.reshape(a, (c, r)), w(c, r)), [_leaf(rng, r, c)]),
        ("concat", lambda a, b: _weighted(F.concat([a, b], axis=1), w(r, c + p)), [_leaf(rng, r, c), _leaf(rng, r, p)]),
        ("gather", lambda a: _weighted(F.gather(a, idx, axis=1), w(r, c2)), [_leaf(rng, r, c)]),
        ("index", lambda a: _weighted(F.index(a, idx), w(c2, p)), [_leaf(rng, c, p)]),
        ("sum", lambda a: _weighted(F.sum(a, axis=1), w(r)), [_leaf(rng, r, c)]),
        ("mean", lambda a: _weighted(F.mean(a, axis=0), w(c)), [_leaf(rng, r, c)]),
        ("softmax", lambda a: _weighted(F.softmax(a, axis=-1), w_rc), [_leaf(rng, r, c)]),
        ("log_softmax", lambda a: _weighted(F.log_softmax(a, axis=-1), w_rc), [_leaf(rng, r, c)]),
        ("layer_norm", lambda x, g, b: _weighted(F.layer_norm(x, g, b), w(r, c2)),
         [_leaf(rng, r, c2), _leaf(rng, c2), _leaf(rng, c2)]),
        ("conv1d", lambda x, k, b: _weighted(F.conv1d(x, k, b, stride=2, padding=(1, 0)),
                                              w(batch, c_out, (length - 2) // 2 + 1)),
         [_leaf(rng, batch, c_in, length), _leaf(rng, c_out, c_in, 3), _leaf(rng, c_out)]),
        ("conv_transpose1d", lambda x, k, b: _weighted(F.conv_transpose1d(x, k, b, stride=2),
                                                        w(batch, c_out, 2 * length + 1)),
         [_leaf(rng, batch, c_in, length), _leaf(rng, c_in, c_out, 3), _leaf(rng, c_out)]),
        ("cross_entropy", lambda a: F.cross_entropy(a, targets), [_leaf(rng, r, c2)]),
        ("neighborhood_attention",
         lambda q, k, v, b: _weighted(na_kernel.neighborhood_attention(q, k, v, b, window), w(heads, n, d)),
         [_leaf(rng, heads, n, d), _leaf(rng, heads, n, d), _leaf(rng, heads, n, d),
          _leaf(rng, heads, 2 * window - 1)]),
        ("supcon", lambda z: supcon_loss(z, labels, tau=0.5), [_leaf(rng, labels.size, 4)]),
        ("unused_input", lambda a, b: _weighted(a, w_rc), [_leaf(rng, r, c), _leaf(rng, 2)]),
    ]


def network_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[..., Tensor], List[Tensor]]]:
    """NAT block and the mini network's pretraining and fine-tuning losses."""
    block = NATBlock(dim=4, heads=2, window=3, mlp_ratio=2.0, rng=rng)
    block.rpb.data = rng.standard_normal(block.rpb.shape)
    block_weight = rng.standard_normal((2, 7, 4))

    model = ECGNAT(mini_model_config(), rng=rng)
    plans = sample_plans(2, model.config.token_len, 0.5, 0.2, rng)
    labels = np.array([0, 0, 1, 1])

    def recon(x, *params):
        tokens = model.tokenize(x)
        corrupted = apply_mask(tokens, plans, np.random.default_rng(7))
        return recon_loss(x, model.decode(model.encode_tokens(corrupted)), plans)

    def dual(x, *params):
        z = model.encode(x)
        return total_loss(model.embed(z), model.classify(z), labels, alpha=0.5, tau=0.5).total

    named = dict(model.named_parameters())
    picked = [named[n] for n in ("tok1.weight", "stages.0.0.qkv.weight", "stages.0.0.rpb",
                                 "downsamplers.0.weight", "stages.1.0.fc2.weight")]
    return [
        ("nat_block", lambda x, *p: _weighted(block(x), block_weight),
         [_leaf(rng, 2, 7, 4), block.qkv.weight, block.rpb, block.fc1.weight, block.norm1.weight]),
        ("model_recon", recon, [_leaf(rng, 2, 2, 32)] + picked + [named["decoder.0.weight"]]),
        ("model_total", dual, [_leaf(rng, 4, 2, 32)] + picked + [named["classifier.weight"]]),
    ]


def gradcheck_suite(settings: Dict, rng: np.random.Generator) -> SuiteResult:
    """Every primitive over `primitive_trials` random draws, then the network cases once."""
    suite = SuiteResult("gradcheck")
    trials = settings["primitive_trials"]
    cases = [(f"{name} trial {t}", fn, inputs)
             for t in range(trials) for name, fn, inputs in primitive_cases(rng)]
    for name, fn, inputs in itertools.chain(cases, network_cases(rng)):
        result = gradcheck(fn, inputs, eps=1e-5, rtol=GRADCHECK_RTOL,
                           max_entries=settings["max_entries"], rng=rng)
        suite.record(name, result.passed, f"max relative error {result.max_error:.2e}")
    return suite


# --- loss identities -------------------------------------------------------

def supcon_bruteforce(embeddings: np.ndarray, labels: Sequence[int], tau: float) -> float:
    """Direct enumeration of anchors, positives and denominators."""
    z = np.asarray(embeddings, dtype=np.float64)
    batch = len(labels)

    def sim(a, b):
        return float(z[a] @ z[b] / (max(np.linalg.norm(z[a]), 1e-12) * max(np.linalg.norm(z[b]), 1e-12)))

    terms = []
    for i in range(batch):
        others = [j for j in range(batch) if j != i]
        positives = [p for p in others if labels[p] == labels[i]]
        if not positives:
            continue
        denom = sum(math.exp(sim(i, j) / tau) for j in others)
        terms.append(-sum(math.log(math.exp(sim(i, p) / tau) / denom) for p in positives) / len(positives))
    return float(np.mean(terms)) if terms else 0.0


def loss_identity_suite(settings: Dict, rng: np.random.Generator) -> SuiteResult:
    suite = SuiteResult("losses")
    hand = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    value = supcon_loss(Tensor(hand, dtype=np.float64), np.array([0, 0, 1]), tau=1.0).item()
    suite.record("three-sample hand case", abs(value - supcon_bruteforce(hand, [0, 0, 1], 1.0)) < IDENTITY_TOL
                 and abs(value - math.log1p(math.exp(-1.0))) < IDENTITY_TOL, f"got {value}")
    two = supcon_loss(Tensor(rng.standard_normal((2, 5)), dtype=np.float64), np.array([1, 1]), tau=0.07).item()
    suite.record("two same-class samples give 0", two == 0.0, f"got {two}")
    ce = ce_loss(Tensor([[2.0, 0.0]], dtype=np.float64), np.array([0])).item()
    suite.record("ce closed form", abs(ce - math.log1p(math.exp(-2.0))) < CE_TOL, f"got {ce}")

    for case in range(settings["identity_cases"]):
        batch, dim, classes = int(rng.integers(2, 9)), int(rng.integers(2, 8)), int(rng.integers(2, 4))
        z = rng.standard_normal((batch, dim))
        logits = rng.standard_normal((batch, classes))
        labels = rng.integers(0, classes, size=batch)
        tau = float(rng.uniform(0.05, 1.0))
        emb, lg = Tensor(z, dtype=np.float64), Tensor(logits, dtype=np.float64)
        sup = supcon_loss(emb, labels, tau).item()
        ce = ce_loss(lg, labels).item()
        suite.record(f"case {case} alpha=0", total_loss(emb, lg, labels, 0.0, tau).total.item() == ce)
        suite.record(f"case {case} alpha=1", total_loss(emb, lg, labels, 1.0, tau).total.item() == sup)
        half = total_loss(emb, lg, labels, 0.5, tau).total.item()
        suite.record(f"case {case} alpha=0.5", abs(half - 0.5 * (sup + ce)) < IDENTITY_TOL, f"{half} vs {0.5 * (sup + ce)}")
        scales = rng.uniform(0.1, 10.0, size=(batch, 1))
        scaled = supcon_loss(Tensor(z * scales, dtype=np.float64), labels, tau).item()
        suite.record(f"case {case} rescaling", abs(scaled - sup) < IDENTITY_TOL, f"diff {abs(scaled - sup):.2e}")
        perm = rng.permutation(batch)
        permuted = supcon_loss(Tensor(z[perm], dtype=np.float64), labels[perm], tau).item()
        suite.record(f"case {case} permutation", abs(permuted - sup) < IDENTITY_TOL, f"diff {abs(permuted - sup):.2e}")
        oracle = supcon_bruteforce(z, labels.tolist(), tau)
        suite.record(f"case {case} brute force", abs(sup - oracle) < IDENTITY_TOL, f"{sup} vs {oracle}")
        closed = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(batch), labels]))
        suite.record(f"case {case} ce log-sum-exp", abs(ce - closed) < CE_TOL, f"{ce} vs {closed}")
        suite.record(f"case {case} non-negative", sup >= 0.0, f"got {sup}")
    return suite


# --- metrics ---------------------------------------------------------------

def hand_confusion_f1(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> float:
    scores = []
    for c in range(n_classes):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return sum(scores) / n_classes


def metric_suite(settings: Dict, rng: np.random.Generator) -> SuiteResult:
    suite = SuiteResult("metrics")
    value = binary_auroc([0.1, 0.4, 0.35, 0.8], np.array([0, 0, 1, 1]) == 1)
    suite.record("four-sample AUROC", value == 0.75, f"got {value}")
    suite.record("two-class macro F1", macro_f1([0, 0, 1, 1], [0, 1, 0, 1], 2) == 0.5)
    suite.record("three of four accuracy", accuracy([0, 1, 2, 2], [0, 1, 2, 0]) == 0.75)

    for case in range(settings["auroc_cases"]):
        n = int(rng.integers(2, 51))
        positives = rng.random(n) < 0.5
        positives[0], positives[-1] = True, False
        scores = np.round(rng.random(n), 1)
        rank, pair = binary_auroc(scores, positives), pairwise_auroc(scores, positives)
        suite.record(f"auroc case {case} N={n}", rank == pair, f"{rank} vs {pair}")

    for n_classes in (2, 3):
        for preds in itertools.product(range(n_classes), repeat=4 if n_classes == 2 else 3):
            labels = [i % n_classes for i in range(len(preds))]
            got, want = macro_f1(preds, labels, n_classes), hand_confusion_f1(preds, labels, n_classes)
            suite.record(f"macro F1 {preds}", abs(got - want) < 1e-12, f"{got} vs {want}")
            acc = sum(p == y for p, y in zip(preds, labels)) / len(preds)
            suite.record(f"accuracy {preds}", abs(accuracy(preds, labels) - acc) < 1e-12)
    return suite


# --- driver ----------------------------------------------------------------

SUITES: Dict[str, Callable[[Dict, np.random.Generator], SuiteResult]] = {
    "oracle": oracle_suite,
    "gradcheck": gradcheck_suite,
    "losses": loss_identity_suite,
    "metrics": metric_suite,
}


def _perturbed_na_backward(original):
    def faulty(grad_out, ctx):
        dq, dk, dv, dbias = original(grad_out, ctx)
        return dq * 1.05, dk, dv, dbias
    return faulty


FAULTS = {"na-backward": lambda: mock.patch.object(na_kernel, "na_backward",
                                                   new=_perturbed_na_backward(na_kernel.na_backward))}


@contextmanager
def inject_fault(name: Optional[str]) -> Iterator[None]:
    """Temporarily break a component so the suites can be seen to fail."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ConfigurationError(f"Unknown fault {name!r}", f"known faults: {sorted(FAULTS)}")
    logger.warning(f"Injecting fault '{name}'")
    with FAULTS[name]():
        yield


def run_verification(level: str = "full", seed: int = 0, suites: Optional[Sequence[str]] = None,
                     fault: Optional[str] = None, progress: bool = False) -> VerificationReport:
    """Run the selected suites in float64 and collect per-suite counts."""
    if level not in LEVELS:
        raise ConfigurationError(f"Unknown verification level {level!r}", f"use one of {sorted(LEVELS)}")
    names = list(suites or SUITES)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ConfigurationError(f"Unknown verification suites {sorted(unknown)}")
    report = VerificationReport(level=level)
    with precision("float64"), inject_fault(fault), \
            ProgressTracker(len(names), desc="verify", disable=not progress) as tracker:
        for i, name in enumerate(names):
            result = SUITES[name](LEVELS[level], np.random.default_rng([seed, i]))
            report.suites.append(result)
            logger.info(f"Suite {name}: {result.passed} passed, {result.failed} failed")
            tracker.update()
    return report


__all__ = [
    "SuiteResult", "VerificationReport", "oracle_suite", "gradcheck_suite", "loss_identity_suite", "metric_suite",
    "mini_model_config", "primitive_cases", "network_cases", "supcon_bruteforce", "hand_confusion_f1",
    "inject_fault", "run_verification",
    "SUITES", "LEVELS", "FAULTS",
]
