"""Reference numerics for the detection loss family and optimizer steps.

These are deliberately plain, scalar-semantics implementations meant to
serve as oracles for training code: classification log-loss, smooth-L1
box regression, per-pixel binary cross-entropy mask loss, and SGD/Adam
state transitions with an optimizer-switch schedule. Probabilities are
clamped to [1e-7, 1 - 1e-7] before any log, because the loss formulas
are undefined at exactly 0 or 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

CLAMP_EPS = 1e-7

DEFAULT_LAMBDA = 10.0
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPSILON = 1e-8


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)


@dataclass
class ClsBatch:
    """Predicted objectness probabilities and 0/1 labels for one mini-batch."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.probs.ndim != 1 or self.probs.shape != self.labels.shape:
            raise ValueError(f"probs/labels must be equal-length vectors, got "
                             f"{self.probs.shape} and {self.labels.shape}")
        if self.probs.size == 0:
            raise ValueError("batch must be non-empty")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    @property
    def n_cls(self) -> int:
        return self.probs.size


@dataclass
class BoxBatch:
    """Predicted and target box deltas with per-anchor positivity weights.

    ``n_cls`` is the mini-batch normalizer and may differ from the
    number of rows; ``lam`` balances the box term against the
    classification term.
    """

    preds: np.ndarray       # (n, 4) rows of (tx, ty, tw, th)
    targets: np.ndarray     # (n, 4)
    weights: np.ndarray     # (n,) anchor positivity, 1 for positive anchors
    lam: float = DEFAULT_LAMBDA
    n_cls: Optional[int] = None

    def __post_init__(self) -> None:
        self.preds = np.asarray(self.preds, dtype=np.float64).reshape(-1, 4)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 4)
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.preds.shape != self.targets.shape or len(self.weights) != len(self.preds):
            raise ValueError("preds, targets and weights must agree in length")
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.n_cls is None:
            self.n_cls = len(self.preds)
        if self.n_cls <= 0:
            raise ValueError(f"n_cls must be positive, got {self.n_cls}")


@dataclass
class MaskPair:
    """Ground-truth 0/1 grid and the predicted probability grid of its class."""

    target: np.ndarray   # (m, m) of {0, 1}
    probs: np.ndarray    # (m, m) predicted probabilities for class k
    class_index: int = 1

    def __post_init__(self) -> None:
        self.target = np.asarray(self.target, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.target.ndim != 2 or self.target.shape[0] != self.target.shape[1]:
            raise ValueError(f"target must be a square grid, got {self.target.shape}")
        if self.probs.shape != self.target.shape:
            raise ValueError(f"probs shape {self.probs.shape} != target shape {self.target.shape}")
        if not np.all((self.target == 0) | (self.target == 1)):
            raise ValueError("target cells must be 0 or 1")

    @property
    def m(self) -> int:
        return self.target.shape[0]


def cls_loss(batch: ClsBatch) -> float:
    """Binary log-loss averaged over the mini-batch."""
    p = _clamp(batch.probs)
    y = batch.labels
    terms = y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
    return float(-terms.sum() / batch.n_cls)


def cls_loss_grad(batch: ClsBatch) -> np.ndarray:
    """d(cls_loss)/d(probs); exact where the clamp is inactive."""
    p = _clamp(batch.probs)
    y = batch.labels
    return -(y / p - (1.0 - y) / (1.0 - p)) / batch.n_cls


def smooth_l1(s: float) -> float:
    """0.5 s^2 inside |s| < 1, |s| - 0.5 outside; continuous and C1 at the joint."""
    if not math.isfinite(s):
        raise ValueError(f"smooth_l1 input must be finite, got {s}")
    a = abs(s)
    if a < 1.0:
        return 0.5 * s * s
    return a - 0.5


def _smooth_l1_arr(s: np.ndarray) -> np.ndarray:
    a = np.abs(s)
    return np.where(a < 1.0, 0.5 * s * s, a - 0.5)


def box_loss(batch: BoxBatch) -> float:
    """Weighted smooth-L1 over the four delta components, scaled by lam/n_cls."""
    diffs = _smooth_l1_arr(batch.preds - batch.targets).sum(axis=1)
    return float(batch.lam / batch.n_cls * (batch.weights * diffs).sum())


def mask_loss(pair: MaskPair) -> float:
    """Average per-cell binary cross-entropy against the ground-truth grid."""
    p = _clamp(pair.probs)
    y = pair.target
    terms = y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
    return float(-terms.sum() / (pair.m * pair.m))


def mask_loss_grad(pair: MaskPair) -> np.ndarray:
    """d(mask_loss)/d(probs); exact where the clamp is inactive."""
    p = _clamp(pair.probs)
    y = pair.target
    return -(y / p - (1.0 - y) / (1.0 - p)) / (pair.m * pair.m)


def total_loss(cls_term: float, box_term: float, mask_term: float) -> float:
    """The combined objective: classification + box + mask."""
    return cls_term + box_term + mask_term


# ---------------------------------------------------------------------------
# Optimizer steppers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerState:
    """Immutable optimizer state; stepping returns a new state."""

    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64))
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64))
        if not (self.theta.shape == self.m.shape == self.v.shape):
            raise ValueError("theta, m, v must share one shape")
        if np.any(self.v < 0):
            raise ValueError("second-moment estimate must be non-negative")
        if self.t < 0:
            raise ValueError(f"step counter must be >= 0, got {self.t}")

    @classmethod
    def initial(cls, theta: np.ndarray, lr: float, **kwargs) -> "OptimizerState":
        theta = np.asarray(theta, dtype=np.float64)
        zeros = np.zeros_like(theta)
        return cls(theta=theta, m=zeros, v=zeros.copy(), t=0, lr=lr, **kwargs)


def _check_grad(state: OptimizerState, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {state.theta.shape}")
    return grad


def adam_step(state: OptimizerState, grad: np.ndarray, bias_correction: bool = True) -> OptimizerState:
    """One Adam update.

    m <- beta1 m + (1-beta1) g, v <- beta2 v + (1-beta2) g^2, both
    bias-corrected by their 1 - beta^t factors, then
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps). Disabling
    ``bias_correction`` uses the raw moments, which demonstrates the
    zero-initialization bias in early steps.
    """
    grad = _check_grad(state, grad)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    if bias_correction:
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
    else:
        m_hat, v_hat = m, v
    theta = state.theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, theta=theta, m=m, v=v, t=t)


def sgd_step(state: OptimizerState, grad: np.ndarray) -> OptimizerState:
    """Plain gradient descent (no momentum): theta <- theta - lr * g."""
    grad = _check_grad(state, grad)
    return replace(state, theta=state.theta - state.lr * grad, t=state.t + 1)


def schedule(epoch: int, plan: Sequence[tuple[int, str, float]]) -> tuple[str, float]:
    """Resolve the (optimizer kind, learning rate) active at an epoch.

    ``plan`` is a list of (start_epoch, kind, lr) sorted by start
    epoch; the entry with the greatest start_epoch <= epoch wins.
    """
    if not plan:
        raise ValueError("plan must contain at least one phase")
    starts = [p[0] for p in plan]
    if starts != sorted(starts):
        raise ValueError(f"plan must be sorted by start epoch, got starts {starts}")
    if epoch < starts[0]:
        raise ValueError(f"epoch {epoch} precedes the first phase at {starts[0]}")
    active = plan[0]
    for phase in plan:
        if phase[0] <= epoch:
            active = phase
        else:
            break
    return active[1], active[2]


def three_phase_plan(
    kind: str = "adam",
    rates: tuple[float, float, float] = (1e-4, 1e-5, 1e-6),
    total_epochs: int = 100,
) -> list[tuple[int, str, float]]:
    """Fast/medium/slow rate plan with phase boundaries at thirds of the run."""
    starts = (0, total_epochs // 3, 2 * total_epochs // 3)
    return [(start, kind, rate) for start, rate in zip(starts, rates)]


# ---------------------------------------------------------------------------
# Case-file evaluation (for cross-implementation diffing)
# ---------------------------------------------------------------------------

def evaluate_case(line: str) -> float:
    """Evaluate one case line: ``<op> <json-args>``.

    Supported ops and their JSON argument objects:
      cls       {"probs": [...], "labels": [...]}
      box       {"preds": [[4]...], "targets": [[4]...], "weights": [...],
                 "lam": 10.0, "n_cls": 256}
      mask      {"target": [[...]], "probs": [[...]]}
      smooth_l1 {"s": 0.5}
      total     {"cls": a, "box": b, "mask": c}
    """
    op, _, payload = line.strip().partition(" ")
    try:
        args = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise ValueError(f"case arguments are not valid JSON: {exc}") from exc
    if op == "cls":
        return cls_loss(ClsBatch(args["probs"], args["labels"]))
    if op == "box":
        return box_loss(BoxBatch(args["preds"], args["targets"], args["weights"],
                                 lam=args.get("lam", DEFAULT_LAMBDA),
                                 n_cls=args.get("n_cls")))
    if op == "mask":
        return mask_loss(MaskPair(args["target"], args["probs"]))
    if op == "smooth_l1":
        return smooth_l1(args["s"])
    if op == "total":
        return total_loss(args["cls"], args["box"], args["mask"])
    raise ValueError(f"unknown case op '{op}'")


def evaluate_cases(text: str) -> list[float]:
    """Evaluate every non-empty, non-comment line of a case file."""
    results = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            results.append(evaluate_case(line))
    return results


# ---------------------------------------------------------------------------
# Built-in self-check ("losses check")
# ---------------------------------------------------------------------------

def _loop_cls(probs, labels) -> float:
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(p, CLAMP_EPS), 1.0 - CLAMP_EPS)
        total += y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
    return -total / len(probs)


def _loop_box(preds, targets, weights, lam, n_cls) -> float:
    total = 0.0
    for pred, tgt, w in zip(preds, targets, weights):
        acc = 0.0
        for a, b in zip(pred, tgt):
            s = a - b
            acc += 0.5 * s * s if abs(s) < 1.0 else abs(s) - 0.5
        total += w * acc
    return lam / n_cls * total


def _loop_mask(target, probs) -> float:
    m = len(target)
    total = 0.0
    for row_y, row_p in zip(target, probs):
        for y, p in zip(row_y, row_p):
            p = min(max(p, CLAMP_EPS), 1.0 - CLAMP_EPS)
            total += y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
    return -total / (m * m)


def _fd_check(fn, grad_fn, probs_builder, rng) -> float:
    """Worst relative error of the analytic gradient vs central differences."""
    worst = 0.0
    h = 1e-6
    for _ in range(10):
        obj = probs_builder(rng)
        grads = grad_fn(obj)
        probs = obj.probs
        flat_idx = rng.integers(0, probs.size, size=min(8, probs.size))
        for idx in flat_idx:
            orig = probs.flat[idx]
            probs.flat[idx] = orig + h
            up = fn(obj)
            probs.flat[idx] = orig - h
            down = fn(obj)
            probs.flat[idx] = orig
            fd = (up - down) / (2 * h)
            analytic = grads.flat[idx]
            worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-12))
    return worst


def run_self_checks(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Run the oracle and finite-difference suite; returns (name, ok, detail) rows."""
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, bool, str]] = []

    def cls_batch(rng):
        n = 256
        return ClsBatch(rng.uniform(0.05, 0.95, n), rng.integers(0, 2, n))

    def mask_pair(rng):
        return MaskPair((rng.random((28, 28)) < 0.5).astype(float),
                        rng.uniform(0.05, 0.95, (28, 28)))

    worst = 0.0
    for _ in range(100):
        b = cls_batch(rng)
        worst = max(worst, abs(cls_loss(b) - _loop_cls(b.probs.tolist(), b.labels.tolist())))
    rows.append(("cls_loss vs scalar loop", worst < 1e-12, f"max|diff|={worst:.2e}"))

    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 64))
        b = BoxBatch(rng.normal(0, 2, (n, 4)), rng.normal(0, 2, (n, 4)),
                     rng.integers(0, 2, n).astype(float), n_cls=256)
        worst = max(worst, abs(box_loss(b) - _loop_box(b.preds.tolist(), b.targets.tolist(),
                                                       b.weights.tolist(), b.lam, b.n_cls)))
    rows.append(("box_loss vs scalar loop", worst < 1e-12, f"max|diff|={worst:.2e}"))

    worst = 0.0
    for _ in range(100):
        p = mask_pair(rng)
        worst = max(worst, abs(mask_loss(p) - _loop_mask(p.target.tolist(), p.probs.tolist())))
    rows.append(("mask_loss vs scalar loop", worst < 1e-12, f"max|diff|={worst:.2e}"))

    err = _fd_check(cls_loss, cls_loss_grad, cls_batch, rng)
    rows.append(("cls_loss gradient vs central differences", err < 1e-5, f"max rel err={err:.2e}"))
    err = _fd_check(mask_loss, mask_loss_grad, mask_pair, rng)
    rows.append(("mask_loss gradient vs central differences", err < 1e-5, f"max rel err={err:.2e}"))

    left = smooth_l1(1.0 - 1e-9)
    right = smooth_l1(1.0 + 1e-9)
    ok = abs(left - 0.5) < 1e-8 and abs(right - 0.5) < 1e-8
    rows.append(("smooth_l1 continuity at |s|=1", ok, f"left={left}, right={right}"))

    lr = 1e-3
    gs = 10.0 ** rng.uniform(-4, 4, 1000)
    state = OptimizerState.initial(np.zeros(1000), lr=lr)
    stepped = adam_step(state, gs)
    mags = np.abs(stepped.theta - state.theta)
    ok = bool(np.all((mags >= 0.99 * lr) & (mags <= lr)))
    rows.append(("adam first-step magnitude in [0.99, 1.0] x lr", ok,
                 f"range=[{mags.min():.3e}, {mags.max():.3e}]"))

    state = OptimizerState.initial(np.array([0.2]), lr=1e-3)
    start = float(state.theta[0] ** 2)
    for _ in range(100):
        state = adam_step(state, 2.0 * state.theta)
    final = float(state.theta[0] ** 2)
    rows.append(("adam 100 steps halve a quadratic", final < start / 2,
                 f"{start:.4f} -> {final:.4f}"))

    state = OptimizerState.initial(np.array([1.0]), lr=0.1)
    for _ in range(20):
        state = sgd_step(state, 2.0 * state.theta)
    expected = 1.0 * (1 - 2 * 0.1) ** 20
    ok = abs(float(state.theta[0]) - expected) < 1e-12
    rows.append(("sgd geometric convergence on a quadratic", ok,
                 f"theta={float(state.theta[0]):.3e}, closed form={expected:.3e}"))

    kind, rate = schedule(30, [(0, "sgd", 1e-3), (30, "adam", 1e-3)])
    rows.append(("schedule switches optimizer at the phase boundary",
                 (kind, rate) == ("adam", 1e-3), f"epoch 30 -> ({kind}, {rate})"))

    return rows
