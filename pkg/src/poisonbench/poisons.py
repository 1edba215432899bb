"""Poison generators and application under an l-inf pixel budget.

Four families: piecewise-constant regions noise, low-frequency DCT noise,
error-maximizing attacks (PGD and its momentum variant), and the alternating
error-minimizing procedure. Class-wise packs share one delta per class;
sample-wise packs carry one delta per example.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import CLASS_WISE, SAMPLE_WISE, ImageDataset, PoisonPack
from .dct import idct2
from .errors import ConfigError, DataError, NumericError
from .models import build_model
from .tensor import backward, cross_entropy

REGIONS_SUPPORTED_32 = (1, 2, 4, 16, 64, 128, 1024)


def default_step_size(epsilon, steps):
    """Step size letting iterates traverse the ball (2.5 eps / steps), floored
    at one 8-bit pixel quantum, and never above the 2*eps config bound."""
    if epsilon <= 0:
        return 1.0 / 255.0
    return min(max(2.5 * epsilon / steps, 1.0 / 255.0), 2.0 * epsilon)


@dataclass(frozen=True)
class AttackConfig:
    """Iterated sign-gradient attack settings (pixel units)."""

    steps: int
    epsilon: float
    targeted: bool
    step_size: float | None = None
    target_rule: str = "next_class"
    target_class: int | None = None
    momentum_mu: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", default_step_size(self.epsilon, self.steps))
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        # Larger steps than the ball diameter are pure projection churn. The
        # bound is moot for the epsilon=0 degenerate case, where projection
        # pins delta to zero regardless.
        if self.epsilon > 0 and self.step_size > 2 * self.epsilon + 1e-12:
            raise ConfigError(f"step_size {self.step_size} exceeds 2*epsilon {2 * self.epsilon}")
        if self.target_rule not in ("next_class", "fixed"):
            raise ConfigError(f"unknown target_rule '{self.target_rule}'")
        if self.target_rule == "fixed" and self.target_class is None:
            raise ConfigError("target_rule 'fixed' needs target_class")
        if self.momentum_mu < 0:
            raise ConfigError(f"momentum_mu must be >= 0, got {self.momentum_mu}")


def resolve_targets(labels, num_classes, cfg):
    """Attack labels: true labels untargeted, shifted or fixed when targeted."""
    labels = np.asarray(labels)
    if not cfg.targeted:
        return labels
    if cfg.target_rule == "next_class":
        return (labels + 1) % num_classes
    if not 0 <= cfg.target_class < num_classes:
        raise ConfigError(f"target_class {cfg.target_class} outside [0,{num_classes})")
    return np.full_like(labels, cfg.target_class)


def momentum_update(g, grad, mu):
    """One momentum accumulation: g <- mu * g + grad / ||grad||_1 per sample.

    Samples with a zero gradient contribute nothing (their l1 normalization
    is undefined), leaving momentum to carry or stay zero.
    """
    flat = np.abs(grad).reshape(grad.shape[0], -1).sum(axis=1)
    flat = flat.reshape((-1,) + (1,) * (grad.ndim - 1))
    normed = np.divide(grad, flat, out=np.zeros_like(grad), where=flat > 0)
    return mu * g + normed


def attack_iterates(model, images, labels, cfg, num_classes, use_momentum=False):
    """Yield the perturbation after each attack step.

    Each iterate follows sign ascent (descent when targeted) with the l-inf
    clip applied first and the [0,1] pixel box folded back into delta second,
    so both constraints hold after every step.
    """
    if model.mode != "eval":
        raise ConfigError("attacks require the model frozen in eval mode")
    x = np.asarray(images, dtype=np.float32)
    targets = resolve_targets(labels, num_classes, cfg)
    sgn = x.dtype.type(-1.0 if cfg.targeted else 1.0)
    eps = x.dtype.type(cfg.epsilon)
    step = x.dtype.type(cfg.step_size)
    delta = np.zeros_like(x)
    g = np.zeros_like(x)

    for _ in range(cfg.steps):
        with model.frozen():
            adv = T.Tensor(np.clip(x + delta, 0.0, 1.0), requires_grad=True)
            loss = cross_entropy(model.forward(adv), targets)
            backward(loss)
        grad = adv.grad
        if not np.isfinite(grad).all():
            raise NumericError("non-finite input gradient during attack")
        if use_momentum:
            g = momentum_update(g, grad, x.dtype.type(cfg.momentum_mu))
            direction = np.sign(g)
        else:
            direction = np.sign(grad)
        delta = delta + sgn * step * direction
        np.clip(delta, -eps, eps, out=delta)
        delta = np.clip(x + delta, 0.0, 1.0) - x
        yield delta


def pgd_attack(model, images, labels, cfg, num_classes):
    """Iterated sign-gradient attack; plain variant, momentum_mu must be 0."""
    if cfg.momentum_mu != 0:
        raise ConfigError("pgd_attack requires momentum_mu == 0 (use mifgsm_attack)")
    delta = None
    for delta in attack_iterates(model, images, labels, cfg, num_classes):
        pass
    return delta


def mifgsm_attack(model, images, labels, cfg, num_classes):
    """Momentum variant: accumulate l1-normalized gradients before the sign
    step. momentum_mu == 0 degenerates to the plain sign iterates."""
    delta = None
    for delta in attack_iterates(model, images, labels, cfg, num_classes, use_momentum=True):
        pass
    return delta


# ---------------------------------------------------------------------------
# synthetic class-wise generators
# ---------------------------------------------------------------------------


def _regions_grid(n_regions, height, width):
    """Patch grid (rows, cols) with rows*cols == n_regions and both dividing
    the image. Prefers the squarest split; n=2 lands on two side-by-side
    halves, perfect squares land on the square grid."""
    best = None
    for rows in range(1, n_regions + 1):
        if n_regions % rows:
            continue
        cols = n_regions // rows
        if height % rows or width % cols:
            continue
        if rows > cols:
            break
        best = (rows, cols)
    if best is None:
        raise ConfigError(f"n_regions={n_regions} does not tile {height}x{width}")
    return best


def gen_regions_noise(n_regions, num_classes, epsilon, seed, height=32, width=None):
    """Class-wise noise of n_regions flat color patches, each channel value
    exactly +-epsilon from symmetric Bernoulli draws."""
    width = height if width is None else width
    if height == 32 and width == 32:
        if n_regions not in REGIONS_SUPPORTED_32:
            raise ConfigError(f"unsupported n_regions {n_regions}; pick one of "
                              f"{REGIONS_SUPPORTED_32}")
    else:
        root = int(round(np.sqrt(n_regions)))
        if root * root != n_regions or height != width or height % root:
            raise ConfigError(f"n_regions={n_regions} must be a perfect square whose root "
                              f"divides the image side {height}")
    rows, cols = _regions_grid(n_regions, height, width)
    rng = np.random.default_rng(seed)
    eps32 = np.float32(epsilon)
    deltas = np.empty((num_classes, 3, height, width), dtype=np.float32)
    for k in range(num_classes):
        bits = rng.integers(0, 2, size=(n_regions, 3)).astype(np.float32)
        vals = (2.0 * bits - 1.0) * eps32  # {0,1} -> {-eps,+eps}
        grid = vals.reshape(rows, cols, 3).transpose(2, 0, 1)
        deltas[k] = np.repeat(np.repeat(grid, height // rows, axis=1), width // cols, axis=2)
    source = f"regions:n={n_regions};eps={epsilon:.9g};seed={seed}"
    return PoisonPack(mode=CLASS_WISE, epsilon=epsilon, deltas=deltas, source=source,
                      num_classes=num_classes)


def gen_lowfreq_noise(n_freq, num_classes, epsilon, seed, height=32):
    """Class-wise noise from an n_freq x n_freq Gaussian DCT block per
    channel, zero-padded, inverse transformed, and rescaled so the peak
    magnitude of each channel equals epsilon exactly."""
    if n_freq < 2 or n_freq > height:
        raise ConfigError(f"n_freq must lie in [2, {height}], got {n_freq}")
    rng = np.random.default_rng(seed)
    deltas = np.empty((num_classes, 3, height, height), dtype=np.float32)
    for k in range(num_classes):
        for ch in range(3):
            coeffs = np.zeros((height, height))
            coeffs[:n_freq, :n_freq] = rng.standard_normal((n_freq, n_freq))
            spatial = idct2(coeffs)
            peak = np.abs(spatial).max()
            if peak == 0.0:
                raise NumericError("degenerate all-zero low-frequency draw")
            # peak/peak == 1 exactly, so the extreme pixel lands on +-epsilon.
            deltas[k, ch] = (spatial / peak * epsilon).astype(np.float32)
    source = f"lowfreq:n={n_freq};eps={epsilon:.9g};seed={seed}"
    return PoisonPack(mode=CLASS_WISE, epsilon=epsilon, deltas=deltas, source=source,
                      num_classes=num_classes)


# ---------------------------------------------------------------------------
# optimized poisons
# ---------------------------------------------------------------------------


def craft_errmax_poison(crafting_model, ds, cfg, batch_size=128):
    """Sample-wise error-maximizing pack: one adversarial perturbation per
    example against a clean-trained crafting model. momentum_mu selects the
    attack (0 plain, >0 momentum)."""
    attack = mifgsm_attack if cfg.momentum_mu > 0 else pgd_attack
    deltas = np.empty_like(ds.images)
    for lo in range(0, ds.n, batch_size):
        sl = slice(lo, lo + batch_size)
        deltas[sl] = attack(crafting_model, ds.images[sl], ds.labels[sl], cfg, ds.num_classes)
    kind = "mifgsm" if cfg.momentum_mu > 0 else "pgd"
    source = (f"errmax_{kind}:steps={cfg.steps};step_size={cfg.step_size:.9g};"
              f"eps={cfg.epsilon:.9g};targeted={int(cfg.targeted)};rule={cfg.target_rule};"
              f"mu={cfg.momentum_mu:g};seed={cfg.rng_seed}")
    return PoisonPack(mode=SAMPLE_WISE, epsilon=cfg.epsilon, deltas=deltas, source=source,
                      num_classes=ds.num_classes, orig_indices=ds.orig_indices.copy())


@dataclass(frozen=True)
class ErrMinConfig:
    """Alternating bi-level error-minimizing settings.

    Each outer round takes inner_model_steps SGD mini-batch steps on the
    currently poisoned data, then runs noise_pgd descent steps on the deltas,
    and stops once the surrogate's training accuracy on poisoned data reaches
    stop_train_accuracy (or after max_outer_rounds)."""

    noise_pgd: AttackConfig
    inner_model_steps: int = 10
    stop_train_accuracy: float = 0.99
    max_outer_rounds: int = 20
    mode: str = CLASS_WISE
    batch_size: int = 128
    inner_lr: float = 0.1
    inner_momentum: float = 0.9
    inner_weight_decay: float = 5e-4

    def __post_init__(self):
        if self.mode not in (CLASS_WISE, SAMPLE_WISE):
            raise ConfigError(f"unknown errmin mode '{self.mode}'")
        if not 0.0 <= self.stop_train_accuracy <= 1.0:
            raise ConfigError("stop_train_accuracy must lie in [0,1]")
        if self.inner_model_steps < 1 or self.max_outer_rounds < 1:
            raise ConfigError("inner_model_steps and max_outer_rounds must be >= 1")
        if self.noise_pgd.targeted:
            raise ConfigError("errmin noise descends the true-label loss; use an "
                              "untargeted noise_pgd config")


@dataclass
class ErrMinResult:
    pack: PoisonPack
    stop_reason: str  # "train_accuracy" | "max_rounds"
    rounds: int
    train_accuracy: float


def _apply_deltas(images, labels, deltas, mode, rows=None):
    if mode == CLASS_WISE:
        pert = deltas[labels]
    else:
        pert = deltas[rows]
    return np.clip(images + pert, 0.0, 1.0)


def craft_errmin_poison(ds, cfg, arch, seed):
    """Error-minimizing pack via the alternating procedure.

    The surrogate trains on the live poisoned data; the noise phase then
    descends the true-label loss per class (gradients averaged over class
    members in the batch) or per sample. Fully deterministic given
    (dataset, cfg, arch, seed).
    """
    eps = np.float32(cfg.noise_pgd.epsilon)
    step = np.float32(cfg.noise_pgd.step_size)
    model = build_model(arch, seed)
    m = ds.num_classes if cfg.mode == CLASS_WISE else ds.n
    deltas = np.zeros((m,) + ds.image_shape, dtype=np.float32)
    rng = np.random.default_rng(seed)

    order = np.array([], dtype=np.int64)
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        if cursor >= order.size:
            order = rng.permutation(ds.n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        return idx

    stop_reason = "max_rounds"
    train_acc = 0.0
    rounds_done = 0
    for _ in range(cfg.max_outer_rounds):
        rounds_done += 1
        # (a) fit the surrogate to the current poison
        model.train()
        for _ in range(cfg.inner_model_steps):
            idx = next_batch()
            x = _apply_deltas(ds.images[idx], ds.labels[idx], deltas, cfg.mode, rows=idx)
            model.zero_grad()
            loss = cross_entropy(model.forward(x), ds.labels[idx])
            if not np.isfinite(loss.data):
                raise NumericError("non-finite loss in errmin surrogate training")
            backward(loss)
            T.sgd_step(model.params(), cfg.inner_lr, cfg.inner_momentum, cfg.inner_weight_decay)
        # (b) descend the true-label loss w.r.t. the noise
        model.eval()
        for lo in range(0, ds.n, cfg.batch_size):
            idx = np.arange(lo, min(lo + cfg.batch_size, ds.n))
            labels = ds.labels[idx]
            for _ in range(cfg.noise_pgd.steps):
                x = _apply_deltas(ds.images[idx], labels, deltas, cfg.mode, rows=idx)
                with model.frozen():
                    adv = T.Tensor(x, requires_grad=True)
                    loss = cross_entropy(model.forward(adv), labels)
                    backward(loss)
                grad = adv.grad
                if not np.isfinite(grad).all():
                    raise NumericError("non-finite noise gradient in errmin crafting")
                if cfg.mode == CLASS_WISE:
                    for k in np.unique(labels):
                        # sign of the class-summed gradient == sign of the mean
                        deltas[k] -= step * np.sign(grad[labels == k].sum(axis=0))
                else:
                    deltas[idx] -= step * np.sign(grad)
                np.clip(deltas, -eps, eps, out=deltas)
        # fold the pixel box back into sample-wise deltas; class-wise deltas
        # stay inside the ball and the box is enforced at application time
        if cfg.mode == SAMPLE_WISE:
            deltas = np.clip(ds.images + deltas, 0.0, 1.0) - ds.images
        # stop check on the surrogate's poisoned-data accuracy
        hits = 0
        for lo in range(0, ds.n, cfg.batch_size):
            idx = np.arange(lo, min(lo + cfg.batch_size, ds.n))
            x = _apply_deltas(ds.images[idx], ds.labels[idx], deltas, cfg.mode, rows=idx)
            logits = model.forward(x).data
            hits += int((logits.argmax(axis=1) == ds.labels[idx]).sum())
        train_acc = hits / ds.n
        if train_acc >= cfg.stop_train_accuracy:
            stop_reason = "train_accuracy"
            break

    source = (f"errmin:mode={cfg.mode};rounds={rounds_done};stop={stop_reason};"
              f"inner={cfg.inner_model_steps};pgd_steps={cfg.noise_pgd.steps};"
              f"eps={cfg.noise_pgd.epsilon:.9g};seed={seed};arch={arch.name}")
    pack = PoisonPack(
        mode=cfg.mode, epsilon=cfg.noise_pgd.epsilon, deltas=deltas, source=source,
        num_classes=ds.num_classes,
        orig_indices=ds.orig_indices.copy() if cfg.mode == SAMPLE_WISE else None,
    )
    return ErrMinResult(pack=pack, stop_reason=stop_reason, rounds=rounds_done,
                        train_accuracy=train_acc)


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def apply_poison(ds, pack):
    """x' = clip01(x + delta_label) or clip01(x + delta_sample); labels and
    the source dataset are untouched."""
    if pack.num_classes != ds.num_classes:
        raise DataError(f"pack K={pack.num_classes} does not match dataset K={ds.num_classes}")
    if pack.deltas.shape[1:] != ds.image_shape:
        raise DataError(f"pack image shape {pack.deltas.shape[1:]} does not match "
                        f"dataset {ds.image_shape}")
    if pack.mode == CLASS_WISE:
        pert = pack.deltas[ds.labels]
    else:
        sorter = np.argsort(pack.orig_indices)
        pos = np.searchsorted(pack.orig_indices, ds.orig_indices, sorter=sorter)
        if pos.max(initial=-1) >= pack.orig_indices.size or not np.array_equal(
            pack.orig_indices[sorter[np.minimum(pos, pack.orig_indices.size - 1)]],
            ds.orig_indices,
        ):
            raise DataError("sample_wise pack does not cover the dataset's original indices")
        pert = pack.deltas[sorter[pos]]
    images = np.clip(ds.images + pert, 0.0, 1.0)
    return ImageDataset(images, ds.labels.copy(), num_classes=ds.num_classes,
                        name=f"{ds.name}+{pack.source.split(':', 1)[0]}",
                        orig_indices=ds.orig_indices.copy())
