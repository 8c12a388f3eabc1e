"""l-inf attacks, the TRADES objective and the YOPO-m-n training step.

Models are plain callables ``f(x: Tensor) -> logits`` for attacks. The
training step needs the stem split (``net.stem`` / ``net.after_stem``)
because the perturbation is updated against the first layer alone.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import ops
from .engine import Tape, Tensor
from .errors import NonFiniteError, TamNasError
from .optim import SGD

GRID_EPSILONS = (2 / 255, 4 / 255, 6 / 255, 8 / 255)
GRID_STEPS = (10, 30, 50)


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None  # default 2.5 * epsilon / steps
    random_start: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise TamNasError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise TamNasError(f"steps must be positive, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise TamNasError(f"step_size must be positive, got {self.step_size}")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps


@dataclass(frozen=True)
class TradesConfig:
    lam: float = 1.0
    m: int = 5
    n: int = 3

    def __post_init__(self):
        if self.lam <= 0:
            raise TamNasError(f"lambda must be positive, got {self.lam}")
        if self.m < 1 or self.n < 1:
            raise TamNasError(f"m and n must be >= 1, got m={self.m} n={self.n}")


def project(x: np.ndarray, x_adv: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the l-inf ball around ``x`` and then into the [0, 1] box."""
    x_adv = np.clip(x_adv, x - epsilon, x + epsilon)
    return np.clip(x_adv, 0.0, 1.0).astype(x.dtype, copy=False)


def _check_finite(grad: np.ndarray, what: str) -> None:
    if np.isfinite(grad).all():
        return
    bad = ~np.isfinite(grad.reshape(len(grad), -1)).all(axis=1)
    raise NonFiniteError(f"non-finite {what}", batch_index=int(np.flatnonzero(bad)[0]))


def _forward(model, x: Tensor) -> Tensor:
    if hasattr(model, "after_stem"):
        return model(x, train=False)
    return model(x)


def input_gradient(model, x: np.ndarray, loss_fn) -> tuple:
    """``(loss, d loss / d x)`` for ``loss_fn(logits) -> scalar Tensor``."""
    xt = Tensor(np.array(x))
    with Tape() as tape:
        tape.watch("x", xt)
        logits = _forward(model, xt)
        loss = loss_fn(logits)
    _check_finite(logits.data, "logits")
    grad = tape.backward(loss)["x"]
    _check_finite(grad, "input gradient")
    return float(loss.data), grad


def pgd_attack(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Signed-gradient ascent on cross entropy, projected after every step."""
    x = np.asarray(x)
    if spec.epsilon == 0:
        return x.copy()
    if spec.random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = project(x, x + rng.uniform(-spec.epsilon, spec.epsilon, x.shape).astype(x.dtype), spec.epsilon)
    else:
        x_adv = x.copy()
    for _ in range(spec.steps):
        _, g = input_gradient(model, x_adv, lambda logits: ops.cross_entropy(logits, y))
        x_adv = project(x, x_adv + spec.alpha * np.sign(g).astype(x.dtype), spec.epsilon)
    return x_adv


def trades_loss(model, x, y, eta, lam: float = 1.0, train: bool = False) -> Tensor:
    """``CE(f(x), y) + KL(f(x) || f(x + eta)) / lam`` as a tape-recorded scalar."""
    if lam <= 0:
        raise TamNasError(f"lambda must be positive, got {lam}")
    x = np.asarray(x)
    if hasattr(model, "after_stem"):
        clean = model(Tensor(x), train=train)
        adv = model(Tensor(x + eta), train=train)
    else:
        clean = model(Tensor(x))
        adv = model(Tensor(x + eta))
    return ops.add(ops.cross_entropy(clean, y), ops.scale(ops.kl_divergence(clean, adv), 1.0 / lam))


def find_trades_perturbation(
    model,
    x: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Ascend ``KL(f(x) || f(x + eta))`` over the ball; returns ``eta``.

    The clean logits are fixed. With ``random_start`` the walk begins from a
    tiny Gaussian jitter, since the KL gradient vanishes at ``eta = 0``.
    ``trace`` collects the KL value after every step.
    """
    x = np.asarray(x)
    if spec.epsilon == 0:
        return np.zeros_like(x)
    clean = Tensor(_forward(model, Tensor(x)).data)
    if spec.random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = project(x, x + 0.001 * rng.standard_normal(x.shape).astype(x.dtype), spec.epsilon)
    else:
        x_adv = x.copy()
    for _ in range(spec.steps):
        _, g = input_gradient(model, x_adv, lambda logits: ops.kl_divergence(clean, logits))
        x_adv = project(x, x_adv + spec.alpha * np.sign(g).astype(x.dtype), spec.epsilon)
        if trace is not None:
            trace.append(float(ops.kl_divergence(clean, _forward(model, Tensor(x_adv))).data))
    return x_adv - x


def _initial_eta(x: np.ndarray, attack: AttackSpec, rng) -> np.ndarray:
    if not attack.random_start or attack.epsilon == 0:
        return np.zeros_like(x)
    eta = rng.uniform(-attack.epsilon, attack.epsilon, x.shape).astype(x.dtype)
    return project(x, x + eta, attack.epsilon) - x


def yopo_trades_step(
    net,
    x: np.ndarray,
    y: np.ndarray,
    config: TradesConfig,
    attack: AttackSpec,
    optimizer: SGD,
    lr: float,
    momentum: dict,
    rng: np.random.Generator,
    stats: dict | None = None,
) -> float:
    """One TRADES-YOPO-m-n update on a batch; returns the mean TRADES loss.

    Each of the ``m`` outer iterations runs one full forward/backward of the
    TRADES objective at ``x + eta``. That pass yields the parameter gradient
    (accumulated) and the co-state ``p``: the objective's gradient with
    respect to the stem output at ``x + eta``. The perturbation then takes
    ``n`` signed steps on ``<p, stem(x + eta)>``, which only touches the stem.
    Parameters move once, with the gradient averaged over the ``m`` passes.
    """
    x = np.asarray(x, dtype=np.float32)
    params = net.parameters()
    acc = {k: np.zeros_like(t.data) for k, t in params.items()}
    eta = _initial_eta(x, attack, rng)
    total = 0.0
    for _ in range(config.m):
        with Tape(params) as tape:
            h_adv = tape.watch("__costate__", net.stem(Tensor(x + eta)))
            # clean and perturbed inputs share one batch: on its own, the perturbed
            # batch's statistics would normalise much of the perturbation away
            both = net.after_stem(ops.concat([net.stem(Tensor(x)), h_adv], axis=0), train=True)
            clean, adv = ops.split(both, 0, len(x))
            loss = ops.add(ops.cross_entropy(clean, y), ops.scale(ops.kl_divergence(clean, adv), 1.0 / config.lam))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite TRADES loss {value}")
        grads = tape.backward(loss)
        costate = grads.pop("__costate__")
        for k, g in grads.items():
            acc[k] += g
        total += value
        if stats is not None:
            stats["full_passes"] = stats.get("full_passes", 0) + 1
        for _ in range(config.n):
            xt = Tensor(x + eta)
            with Tape() as inner:
                inner.watch("x", xt)
                h = net.stem(xt)
                coupling = ops.sum(ops.mul(h, Tensor(costate)))
            g = inner.backward(coupling)["x"]
            _check_finite(g, "stem gradient")
            eta = project(x, x + eta + attack.alpha * np.sign(g).astype(x.dtype), attack.epsilon) - x
            if stats is not None:
                stats["stem_passes"] = stats.get("stem_passes", 0) + 1
    for k in acc:
        acc[k] /= config.m
    optimizer.step(params, acc, momentum, lr)
    return total / config.m


def pgd_trades_step(
    net,
    x: np.ndarray,
    y: np.ndarray,
    lam: float,
    attack: AttackSpec,
    optimizer: SGD,
    lr: float,
    momentum: dict,
    rng: np.random.Generator,
    stats: dict | None = None,
) -> float:
    """Reference TRADES update: full KL-PGD inner loop, then one parameter step."""
    x = np.asarray(x, dtype=np.float32)
    eta = find_trades_perturbation(net, x, attack, rng)
    if stats is not None:
        stats["full_passes"] = stats.get("full_passes", 0) + attack.steps
    params = net.parameters()
    with Tape(params) as tape:
        loss = trades_loss(net, x, y, eta, lam, train=True)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite TRADES loss {value}")
    optimizer.step(params, tape.backward(loss), momentum, lr)
    return value


def robust_accuracy(net, x: np.ndarray, y: np.ndarray, spec: AttackSpec, seed: int = 0, batch_size: int = 256) -> float:
    """Percent of samples still classified correctly after PGD."""
    if len(x) == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    correct = 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        x_adv = pgd_attack(net, xb, yb, spec, rng)
        correct += int((_forward(net, Tensor(x_adv)).data.argmax(axis=1) == yb).sum())
    return 100.0 * correct / len(x)


def attack_grid(
    net,
    x: np.ndarray,
    y: np.ndarray,
    epsilons=GRID_EPSILONS,
    steps=GRID_STEPS,
    seed: int = 0,
    random_start: bool = True,
) -> list:
    """Rows of ``(epsilon, steps, accuracy)`` over the grid."""
    rows = []
    for eps in epsilons:
        for k in steps:
            spec = AttackSpec(epsilon=eps, steps=k, random_start=random_start)
            rows.append((float(eps), int(k), robust_accuracy(net, x, y, spec, seed)))
    return rows


def grid_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epsilon", "steps", "accuracy"])
    for eps, k, acc in rows:
        w.writerow([f"{eps:.6f}", k, f"{acc:.4f}"])
    return buf.getvalue()
