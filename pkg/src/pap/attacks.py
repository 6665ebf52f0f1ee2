"""Universal perturbation generators: L4A variants and baselines.

All loss functions take a clean batch ``x`` [B,C,H,W] and a universal
``delta`` [C,H,W], feed ``x + delta`` (unclamped) to the model and return
the loss together with its gradient w.r.t. ``delta``. ``generate`` runs the
shared projected sign-gradient loop

    delta <- clip(delta - step_size * sign(direction), -eps, eps)

where ``direction`` is the gradient (or its momentum accumulation).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .ga import GradientTrace
from .nets import NUM_BLOCKS, Model

log = logging.getLogger(__name__)

METHODS = ("l4a_base", "l4a_fuse", "l4a_ugs", "fff", "ssp", "dr", "uap", "uapepgd", "pixel", "random")
FFF_FLOOR = 1e-12


class AttackDiverged(RuntimeError):
    pass


def project_linf(delta: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(delta, -eps, eps)


def apply_perturbation(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """``clip(x + delta, 0, 1)``; the clamp happens here, never inside delta."""
    if x.shape[1:] != delta.shape:
        raise ValueError(f"perturbation shape {delta.shape} does not match images {x.shape[1:]}")
    return np.clip(x + delta, 0.0, 1.0)


@dataclass
class Perturbation:
    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.abs(self.delta).max(initial=0.0) > self.epsilon:
            raise ValueError("perturbation exceeds its L-inf budget")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return apply_perturbation(x, self.delta)


@dataclass
class AttackConfig:
    """Method selector plus every loss / optimisation hyperparameter.

    Defaults follow the reference protocol: batch 16, step 2e-4, budget
    0.05, checkpoints at 1k/5k/30k/60k steps and UGS ranges
    (0.4, 0.6, 0.05, 0.1).
    """

    method: str
    name: str | None = None
    epsilon: float = 0.05
    k: int = 1
    k1: int = 1
    k2: int = 2
    lam: float = 1.0
    mu: float = 0.0
    ugs_ranges: tuple[float, float, float, float] = (0.4, 0.6, 0.05, 0.1)
    steps: int = 60_000
    step_size: float = 2e-4
    batch_size: int = 16
    seed: int = 0
    checkpoints: tuple[int, ...] = (1000, 5000, 30_000, 60_000)
    momentum: float = 0.9
    uap_max_iter: int = 50
    uap_overshoot: float = 0.02
    trace_dense: int = 256
    trace_stride: int = 0

    def __post_init__(self):
        self.ugs_ranges = tuple(float(v) for v in self.ugs_ranges)
        self.checkpoints = tuple(int(v) for v in self.checkpoints)

    @property
    def label(self) -> str:
        return self.name or self.method

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        mu_l, mu_h, s_l, s_h = self.ugs_ranges
        if mu_l > mu_h or s_l > s_h:
            raise ValueError("UGS ranges must satisfy mu_l <= mu_h and sigma_l <= sigma_h")
        if self.step_size <= 0 or self.epsilon <= 0:
            raise ValueError("step_size and epsilon must be positive")
        for kk in (self.k, self.k1, self.k2):
            if not 1 <= kk <= NUM_BLOCKS:
                raise ValueError(f"block index {kk} outside 1..{NUM_BLOCKS}")
        if self.method == "l4a_fuse" and not self.k1 < self.k2:
            raise ValueError("l4a_fuse needs k1 < k2")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lam and mu must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ugs_ranges"] = list(self.ugs_ranges)
        d["checkpoints"] = list(self.checkpoints)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class LossEval:
    loss: float
    grad: np.ndarray
    direction: np.ndarray | None = None

    def __post_init__(self):
        if self.direction is None:
            self.direction = self.grad


# -- feature objectives ------------------------------------------------------
# Each takes the per-block feature maps and returns (loss, {block: dL/dfeature}).


def lift_objective(feats: dict[int, np.ndarray], weights: dict[int, float]):
    """``-sum_k w_k * mean_b |f^k_b|_F^2``; zero weights are skipped entirely."""
    loss = 0.0
    grads = {}
    for k, wk in weights.items():
        if wk == 0:
            continue
        f = feats[k]
        b = f.shape[0]
        loss -= wk * T.frobenius_sq(f) / b
        grads[k] = (-wk / b) * T.frobenius_sq_grad(f)
    return loss, grads


def fff_objective(feats: dict[int, np.ndarray]):
    """``-sum_i log(mean(f^i) + floor)`` over every block."""
    loss = 0.0
    grads = {}
    for k, f in feats.items():
        mean = float(f.mean()) + FFF_FLOOR
        loss -= np.log(mean)
        grads[k] = np.full_like(f, -1.0 / (mean * f.size))
    return float(loss), grads


def _delta_grad(model: Model, x, delta, upto: int, objective):
    xin = x + delta[None]
    trace = model.features(xin, upto)
    loss, fgrads = objective({k: trace[k] for k in range(1, upto + 1)})
    if not fgrads:
        return loss, np.zeros_like(delta)
    dx, _ = model.backward_features(trace, fgrads)
    return loss, dx.sum(axis=0)


def _lift(model, x, delta, weights) -> LossEval:
    active = {k: w for k, w in weights.items() if w != 0}
    if not active:
        return LossEval(0.0, np.zeros_like(delta))
    loss, g = _delta_grad(model, x, delta, max(active), lambda f: lift_objective(f, active))
    return LossEval(loss, g)


def l4a_base_loss(model: Model, x: np.ndarray, delta: np.ndarray, k: int = 1) -> LossEval:
    """``-mean_b |f^k(x_b + delta)|_F^2``; backward only through blocks 1..k."""
    return _lift(model, x, delta, {k: 1.0})


def l4a_fuse_loss(
    model: Model, x: np.ndarray, delta: np.ndarray, k1: int = 1, k2: int = 2, lam: float = 1.0, mu: float = 0.0
) -> LossEval:
    """Lift block k1 plus ``lam`` times block k2, plus ``mu`` times blocks 3..5."""
    weights = {k1: 1.0}
    weights[k2] = weights.get(k2, 0.0) + lam
    if mu:
        for j in range(3, NUM_BLOCKS + 1):
            weights[j] = weights.get(j, 0.0) + mu
    return _lift(model, x, delta, weights)


def sample_ugs_noise(shape, ranges, rng: np.random.Generator, dtype=np.float32):
    """Gaussian noise whose mean and std are themselves uniform draws."""
    mu_l, mu_h, s_l, s_h = ranges
    mu = rng.uniform(mu_l, mu_h)
    sigma = rng.uniform(s_l, s_h)
    return (mu + sigma * rng.standard_normal(shape)).astype(dtype), mu, sigma


def l4a_ugs_loss(
    model: Model,
    x: np.ndarray,
    delta: np.ndarray,
    k: int = 1,
    lam: float = 1.0,
    ranges=(0.4, 0.6, 0.05, 0.1),
    rng: np.random.Generator | None = None,
) -> LossEval:
    """Lifting loss on the data batch plus ``lam`` times the same loss on UGS noise.

    Noise is drawn on every call (also when ``lam`` is 0) so the generator
    advances identically whatever the weight.
    """
    rng = np.random.default_rng() if rng is None else rng
    noise, _, _ = sample_ugs_noise(x.shape, ranges, rng, x.dtype)
    base = l4a_base_loss(model, x, delta, k)
    if lam == 0:
        return base
    extra = l4a_base_loss(model, noise, delta, k)
    return LossEval(base.loss + lam * extra.loss, base.grad + lam * extra.grad)


def fff_loss(model: Model, x: np.ndarray, delta: np.ndarray) -> LossEval:
    loss, g = _delta_grad(model, x, delta, NUM_BLOCKS, fff_objective)
    return LossEval(loss, g)


def ssp_loss(model: Model, x: np.ndarray, delta: np.ndarray, k: int = 1) -> LossEval:
    """``-mean_b |f^k(x_b + delta) - f^k(x_b)|^2``."""
    clean = model.features(x, k)[k]

    def objective(feats):
        diff = feats[k] - clean
        b = diff.shape[0]
        return -T.frobenius_sq(diff) / b, {k: (-2.0 / b) * diff}

    loss, g = _delta_grad(model, x, delta, k, objective)
    return LossEval(loss, g)


def dr_loss(model: Model, x: np.ndarray, delta: np.ndarray, k: int = 1) -> LossEval:
    """``mean_b std(f^k(x_b + delta))``; samples with zero spread give zero gradient."""

    def objective(feats):
        f = feats[k]
        b = f.shape[0]
        flat = f.reshape(b, -1)
        centred = flat - flat.mean(axis=1, keepdims=True)
        std = np.sqrt(np.mean(centred**2, axis=1))
        safe = np.where(std > 0, std, 1.0)
        g = np.where((std > 0)[:, None], centred / (flat.shape[1] * safe[:, None] * b), 0.0)
        return float(std.mean()), {k: g.reshape(f.shape).astype(f.dtype)}

    loss, g = _delta_grad(model, x, delta, k, objective)
    return LossEval(loss, g)


class Momentum:
    """``g <- decay * g + grad / |grad|_1``."""

    def __init__(self, decay: float = 0.9):
        if not 0 <= decay < 1:
            raise ValueError("momentum decay must be in [0, 1)")
        self.decay = decay
        self.state: np.ndarray | None = None

    def update(self, grad: np.ndarray) -> np.ndarray:
        l1 = np.abs(grad).sum()
        inc = grad / l1 if l1 > 0 else np.zeros_like(grad)
        self.state = inc if self.state is None else self.decay * self.state + inc
        return self.state


def uapepgd_loss(
    model: Model,
    x: np.ndarray,
    delta: np.ndarray,
    momentum_state: Momentum | None = None,
    labels: np.ndarray | None = None,
) -> LossEval:
    """Negative cross-entropy against the clean predictions ``F(x)``.

    ``grad`` is the raw gradient; ``direction`` is the momentum
    accumulation when a state is supplied.
    """
    if labels is None:
        labels = model.logits(x).argmax(axis=1)
    logits, trace = model.forward(x + delta[None])
    ce, dlogits = T.softmax_cross_entropy(logits, labels)
    dx, _ = model.backward(trace, -dlogits.astype(logits.dtype))
    grad = dx.sum(axis=0)
    direction = momentum_state.update(grad) if momentum_state is not None else grad
    return LossEval(-ce, grad, direction)


def pixel_baseline(epsilon: float, shape=(3, 32, 32), dtype=np.float32) -> Perturbation:
    """Constant shift of every pixel by ``epsilon``."""
    return Perturbation(np.full(shape, epsilon, dtype=dtype), epsilon)


def random_baseline(epsilon: float, shape=(3, 32, 32), seed: int = 0, dtype=np.float32) -> Perturbation:
    rng = np.random.default_rng(seed)
    return Perturbation(rng.uniform(-epsilon, epsilon, shape).astype(dtype), epsilon)


# -- decision-boundary step -------------------------------------------------


class LinearClassifier:
    """Affine classifier ``W x + b`` on flattened inputs (tests and probes)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight)
        self.bias = np.asarray(bias)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(len(x), -1) @ self.weight.T + self.bias

    def input_grad(self, x: np.ndarray, logits_grad: np.ndarray) -> np.ndarray:
        return (logits_grad @ self.weight).reshape(x.shape)


@dataclass
class UapStepResult:
    delta: np.ndarray
    zeta: np.ndarray | None
    status: str  # "fooled", "updated" or "no_convergence"
    iterations: int = 0


def minimal_boundary_step(classifier, x: np.ndarray, label: int, max_iter: int = 50, overshoot: float = 0.02):
    """Linearised search for a small L2 step that changes ``classifier``'s decision.

    Returns ``(r, iterations)`` with ``r`` already scaled by ``1 + overshoot``,
    or ``(None, iterations)`` if the label never changes.
    """
    r_tot = np.zeros_like(x)
    for it in range(max_iter):
        xi = x + (1 + overshoot) * r_tot
        logits = classifier.logits(xi[None])[0]
        if logits.argmax() != label:
            return (1 + overshoot) * r_tot, it
        k = len(logits)
        grads = classifier.input_grad(np.repeat(xi[None], k, axis=0), np.eye(k, dtype=xi.dtype))
        w = (grads - grads[label]).reshape(k, -1).astype(np.float64)
        f = (logits - logits[label]).astype(np.float64)
        norms = np.linalg.norm(w, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            pert = np.abs(f) / norms
        pert[label] = np.inf
        pert[norms == 0] = np.inf
        j = int(np.argmin(pert))
        if not np.isfinite(pert[j]):
            return None, it
        r_tot = r_tot + ((pert[j] + 1e-4) * w[j] / norms[j]).reshape(x.shape).astype(x.dtype)
    xi = x + (1 + overshoot) * r_tot
    if classifier.logits(xi[None])[0].argmax() != label:
        return (1 + overshoot) * r_tot, max_iter
    return None, max_iter


def uap_step(
    classifier, x: np.ndarray, delta: np.ndarray, epsilon: float, max_iter: int = 50, overshoot: float = 0.02
) -> UapStepResult:
    """One universal-perturbation update for a single image ``x`` [C,H,W].

    If ``x + delta`` is still classified as ``x`` the minimal boundary step
    ``zeta`` is found and ``delta <- clip(delta + zeta, -eps, eps)``.
    """
    label = int(classifier.logits(x[None])[0].argmax())
    if int(classifier.logits((x + delta)[None])[0].argmax()) != label:
        return UapStepResult(delta, None, "fooled")
    zeta, iters = minimal_boundary_step(classifier, x + delta, label, max_iter, overshoot)
    if zeta is None:
        return UapStepResult(delta, None, "no_convergence", iters)
    return UapStepResult(project_linf(delta + zeta, epsilon), zeta, "updated", iters)


# -- generation loop ---------------------------------------------------------


@dataclass
class AttackResult:
    config: AttackConfig
    perturbation: Perturbation
    trace: GradientTrace
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)
    skipped: int = 0


def _rngs(seed: int):
    ss = np.random.SeedSequence([seed, 0xA77AC])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def generate(
    model: Model,
    images: np.ndarray,
    config: AttackConfig,
    classifier=None,
    model_hash: str = "",
    on_step=None,
) -> AttackResult:
    """Craft a universal perturbation against ``model`` from ``images``.

    ``classifier`` (defaults to ``model`` itself) supplies the decisions for
    the uap/uapepgd baselines. ``on_step(step, delta)`` is called after every
    update.
    """
    config.validate()
    eps = config.epsilon
    shape = images.shape[1:]
    dtype = images.dtype
    trace = GradientTrace(config.label, model_hash, config.trace_dense, config.trace_stride)
    if config.method == "pixel":
        p = pixel_baseline(eps, shape, dtype)
        return AttackResult(config, p, trace, {0: p.delta.copy()})
    if config.method == "random":
        p = random_baseline(eps, shape, config.seed, dtype)
        return AttackResult(config, p, trace, {0: p.delta.copy()})

    classifier = model if classifier is None else classifier
    rng, noise_rng = _rngs(config.seed)
    delta = rng.uniform(-eps, eps, shape).astype(dtype)
    momentum = Momentum(config.momentum) if config.method == "uapepgd" else None
    result = AttackResult(config, None, trace)  # type: ignore[arg-type]
    wanted = {c for c in config.checkpoints if 1 <= c <= config.steps} | {config.steps}
    n = len(images)
    zeta_count = 0

    for step in range(1, config.steps + 1):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        x = images[idx]
        if config.method == "uap":
            for xi in x:
                res = uap_step(classifier, xi, delta, eps, config.uap_max_iter, config.uap_overshoot)
                if res.status == "no_convergence":
                    result.skipped += 1
                elif res.status == "updated":
                    zeta_count += 1
                    trace.record(zeta_count, res.zeta)
                    delta = res.delta
        else:
            le = _method_loss(model, classifier, x, delta, config, noise_rng, momentum)
            if not np.isfinite(le.loss):
                raise AttackDiverged(f"non-finite loss {le.loss} at step {step}")
            result.losses.append(le.loss)
            trace.record(step, le.grad)
            delta = project_linf(delta - config.step_size * np.sign(le.direction), eps).astype(dtype)
        if on_step is not None:
            on_step(step, delta)
        if step in wanted:
            result.snapshots[step] = delta.copy()
    if config.steps == 0:
        result.snapshots[0] = delta.copy()
    if result.skipped:
        log.info("%s: %d samples skipped (boundary search did not converge)", config.label, result.skipped)
    result.perturbation = Perturbation(delta, eps)
    return result


def _method_loss(model, classifier, x, delta, config: AttackConfig, noise_rng, momentum) -> LossEval:
    m = config.method
    if m == "l4a_base":
        return l4a_base_loss(model, x, delta, config.k)
    if m == "l4a_fuse":
        return l4a_fuse_loss(model, x, delta, config.k1, config.k2, config.lam, config.mu)
    if m == "l4a_ugs":
        return l4a_ugs_loss(model, x, delta, config.k, config.lam, config.ugs_ranges, noise_rng)
    if m == "fff":
        return fff_loss(model, x, delta)
    if m == "ssp":
        return ssp_loss(model, x, delta, config.k)
    if m == "dr":
        return dr_loss(model, x, delta, config.k)
    if m == "uapepgd":
        return uapepgd_loss(classifier, x, delta, momentum)
    raise ValueError(f"method {m!r} has no loss")


def fit_linear_head(model: Model, images, labels, num_classes: int, epochs: int = 10, lr: float = 0.1, seed: int = 0) -> Model:
    """Copy of ``model`` with a fresh head trained on frozen (eval-mode) features."""
    head = model.copy()
    head.reset_head(num_classes, seed)
    pooled = np.concatenate(
        [T.global_avgpool(head.features(images[i : i + 256])[NUM_BLOCKS]) for i in range(0, len(images), 256)]
    )
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(pooled))
        for s in range(0, len(order), 32):
            idx = order[s : s + 32]
            logits = T.linear(pooled[idx], head.head_weight, head.head_bias)
            _, d = T.softmax_cross_entropy(logits, labels[idx])
            g = T.linear_backward(d.astype(pooled.dtype), pooled[idx], head.head_weight)
            head.head_weight -= (lr * g.param_grads["weight"]).astype(head.head_weight.dtype)
            head.head_bias -= (lr * g.param_grads["bias"]).astype(head.head_bias.dtype)
    return head
