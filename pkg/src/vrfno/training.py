"""Losses, optimizers, and the three training loops.

Covered here: the plain rectified-flow regression loss and loop, the
reflow baseline (regenerating deterministic couplings with a pretrained
field, then training on them), and the joint encoder + viscous velocity
field loop with the historical-velocity term and KL regularizer.

The history term is computed with the field itself at the previous time
slice and detached, so gradients never flow through it.  Divergent runs
(non-finite loss) abort with the iteration index rather than clipping.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, tensor
from .backend import kernels
from .nets import Encoder, VelocityField, reparameterize

COUPLING_KINDS = ("arbitrary", "deterministic", "optimized")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, vcl, kll, total):
        super().__init__(
            f"non-finite loss at iteration {iteration}: "
            f"vcl={vcl}, kll={kll}, total={total}"
        )
        self.iteration = iteration
        self.vcl = vcl
        self.kll = kll
        self.total = total


@dataclass
class Couplings:
    """A batch of (x0, x1) pairs sharing one coupling kind."""

    x0: np.ndarray
    x1: np.ndarray
    kind: str

    def __post_init__(self):
        self.x0 = np.ascontiguousarray(self.x0, dtype=np.float32)
        self.x1 = np.ascontiguousarray(self.x1, dtype=np.float32)
        if self.kind not in COUPLING_KINDS:
            raise ValueError(f"coupling kind must be one of {COUPLING_KINDS}")
        if self.x0.shape != self.x1.shape or self.x0.ndim != 2:
            raise ValueError(
                f"couplings need matching (n, dim) endpoints, "
                f"got {self.x0.shape} and {self.x1.shape}"
            )
        if not (kernels.all_finite(self.x0) and kernels.all_finite(self.x1)):
            raise ValueError("coupling endpoints must be finite")

    def __len__(self):
        return self.x0.shape[0]

    @property
    def dim(self):
        return self.x0.shape[1]

    def take(self, idx):
        return Couplings(x0=self.x0[idx], x1=self.x1[idx], kind=self.kind)


@dataclass
class TrainConfig:
    batch_size: int = 500
    iterations: int = 20000
    learning_rate: float = 1e-3
    alpha: float = 1e-3
    delta_t: float = 0.1
    data_dim: int = 2
    seed: int = 0
    reuse_pool_size: int | None = None
    perturbation_scale: float = 0.1
    optimizer: str = "adam"  # or "sgd" for the literal update rule
    use_hvt: bool = True
    use_encoder: bool = True
    reparam_std: bool = False  # ablation: scale noise by sigma instead of sigma^2
    log_every: int = 1

    def validate(self):
        if not (0.0 < self.delta_t < 1.0):
            raise ValueError(f"delta_t must be in (0, 1), got {self.delta_t}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size >= 1 and iterations >= 0 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer}")
        return self


# ---------------------------------------------------------------------------
# losses


def interpolate(x0, x1, t):
    """t*x1 + (1-t)*x0 for t a scalar in [0,1] or a per-row column."""
    tval = t if np.isscalar(t) else np.asarray(t)
    if np.any(np.asarray(tval) < 0) or np.any(np.asarray(tval) > 1):
        raise ValueError("interpolate: t outside [0, 1]")
    if isinstance(x0, Tensor):
        return ad.lerp(x0, x1, tval)
    return kernels.lerp_fwd(
        np.ascontiguousarray(x0), np.ascontiguousarray(x1), tval
    )


def _mean_row_sq(diff):
    """Mean over rows of the squared L2 row norm: sum(diff^2)/batch."""
    batch = diff.data.shape[0]
    return ad.scale(ad.sum_(ad.square(diff)), 1.0 / batch)


def rf_loss(vf, couplings, t_samples):
    """Mean squared residual of v(x_t, t, 0) against x1 - x0 (zero history)."""
    n = len(couplings)
    if n == 0:
        raise ValueError("rf_loss: empty batch")
    t = np.asarray(t_samples, dtype=np.float32).reshape(n, 1)
    x0 = tensor(couplings.x0)
    x1 = tensor(couplings.x1)
    xt = ad.lerp(x0, x1, t)
    zeros = tensor(np.zeros_like(couplings.x0))
    v = vf.forward(xt, tensor(t), zeros)
    return _mean_row_sq(ad.sub(ad.sub(x1, x0), v))


def vcl_loss(vf, x_t, t, v_history, v_ref):
    """Velocity-consistency loss: squared L2 against the reference velocity."""
    v = vf.forward(x_t, t, v_history)
    return _mean_row_sq(ad.sub(v_ref, v))


def kl_loss(mu, sigma2):
    """Mean over batch and dims of (sigma^2 + mu^2 - 1 - log sigma^2) / 2."""
    if np.any(sigma2.data <= 0):
        raise ValueError("kl_loss: sigma2 must be strictly positive")
    inner = ad.sub(
        ad.sub(ad.add(sigma2, ad.square(mu)), tensor(1.0, dtype=mu.data.dtype)),
        ad.log(sigma2),
    )
    return ad.scale(ad.mean(inner), 0.5)


def total_loss(vcl, kll, alpha):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return ad.add(vcl, ad.scale(kll, alpha))


# ---------------------------------------------------------------------------
# optimizer


class Optimizer:
    """Adam (default) or plain SGD over named parameter tensors."""

    def __init__(self, params, kind="adam", beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer kind must be adam or sgd, got {kind!r}")
        self.kind = kind
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.params = list(params)
        self.moments = {}
        if kind == "adam":
            for name, p in self.params:
                self.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))

    def step(self, lr):
        self.step_count += 1
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} shape {p.data.shape}"
                )
            if self.kind == "adam":
                m, v = self.moments[name]
                kernels.adam_step(
                    p.data, g, m, v, lr, self.beta1, self.beta2, self.eps,
                    self.step_count,
                )
            else:
                kernels.sgd_step(p.data, g, lr)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def optimizer_update(opt, params, grads, lr):
    """Functional form: assign grads to params and apply one update."""
    for (_, p), g in zip(params, grads):
        p.grad = np.asarray(g, dtype=p.data.dtype)
    opt.step(lr)
    opt.zero_grad()


# ---------------------------------------------------------------------------
# VRFNO joint training (encoder + viscous velocity field)


def draw_time(rng, batch, delta_t, low_is_delta=True):
    lo = delta_t if low_is_delta else 0.0
    return rng.uniform((batch, 1), lo, 1.0, dtype=np.float32)


def vrfno_loss_parts(vf, enc, x1_np, eps_np, t_np, cfg, tau=None,
                     v_history_override=None):
    """Build the joint loss graph; returns (vcl, kll, total) tensors.

    `v_history_override` injects a fixed history tensor (used by the
    finite-difference checks, which must treat the detached history as a
    constant).
    """
    dtype = vf.w1.data.dtype
    x1 = tensor(np.asarray(x1_np), dtype=dtype)
    eps = tensor(np.asarray(eps_np), dtype=dtype)
    t = np.asarray(t_np, dtype=np.float64).reshape(-1, 1)

    if cfg.use_encoder:
        mu, sigma2 = enc.forward(x1, tau=tau)
        x0 = reparameterize(eps, mu, sigma2, scale_by_std=cfg.reparam_std)
        kll = kl_loss(mu, sigma2)
    else:
        x0 = eps
        kll = tensor(np.zeros((), dtype=dtype))

    v_ref = ad.sub(x1, x0)
    x_t = ad.lerp(x0, x1, t)
    t_tensor = tensor(t.astype(np.float32), dtype=dtype)

    if not cfg.use_hvt:
        v_history = tensor(np.zeros_like(np.asarray(x1_np), dtype=dtype))
    elif v_history_override is not None:
        v_history = tensor(np.asarray(v_history_override), dtype=dtype)
    else:
        # float32 draws at the t = delta_t boundary can land an ulp below it
        t_prev = np.clip(t - cfg.delta_t, 0.0, 1.0)
        x_prev = ad.lerp(x0, x1, t_prev)
        zeros = tensor(np.zeros_like(np.asarray(x1_np), dtype=dtype))
        t_prev_tensor = tensor(t_prev.astype(np.float32), dtype=dtype)
        v_history = vf.forward(x_prev, t_prev_tensor, zeros).detach()

    vcl = vcl_loss(vf, x_t, t_tensor, v_history, v_ref)
    tot = total_loss(vcl, kll, cfg.alpha)
    return vcl, kll, tot


def vrfno_train_step(vf, enc, batch_x1, rng, cfg, opt):
    """One pass of the joint training loop; returns the loss components."""
    if batch_x1.shape[0] == 0:
        raise ValueError("empty batch")
    batch = batch_x1.shape[0]
    eps = rng.normal((batch, cfg.data_dim))
    tau = (
        enc.draw_perturbation(batch, rng)
        if (cfg.use_encoder and enc is not None)
        else None
    )
    t = draw_time(rng, batch, cfg.delta_t)

    with Tape():
        vcl, kll, tot = vrfno_loss_parts(vf, enc, batch_x1, eps, t, cfg, tau=tau)
        vcl_v, kll_v, tot_v = float(vcl.data), float(kll.data), float(tot.data)
        if not np.isfinite(tot_v):
            raise TrainingDiverged(opt.step_count, vcl_v, kll_v, tot_v)
        ad.backward(tot)
    opt.step(cfg.learning_rate)
    opt.zero_grad()
    return vcl_v, kll_v, tot_v


def joint_parameters(vf, enc=None):
    params = list(vf.parameters())
    if enc is not None:
        params += enc.parameters()
    return params


def vrfno_train(target_sampler, cfg, seed_nets=None, log=None):
    """Full joint training loop on batches drawn from `target_sampler(n, rng)`.

    Returns (velocity_field, encoder, optimizer).  `log`, when given, is
    called as log(iteration, vcl, kll, total).
    """
    cfg.validate()
    from .rng import RngStream

    net_seed = cfg.seed if seed_nets is None else seed_nets
    vf = VelocityField(cfg.data_dim, seed=net_seed)
    enc = (
        Encoder(
            cfg.data_dim,
            seed=net_seed + 1,
            perturbation_scale=cfg.perturbation_scale,
        )
        if cfg.use_encoder
        else None
    )
    opt = Optimizer(joint_parameters(vf, enc), kind=cfg.optimizer)
    rng = RngStream(cfg.seed)
    for it in range(cfg.iterations):
        x1 = target_sampler(cfg.batch_size, rng)
        try:
            vcl_v, kll_v, tot_v = vrfno_train_step(vf, enc, x1, rng, cfg, opt)
        except TrainingDiverged as exc:
            exc.iteration = it
            raise
        if log is not None and it % cfg.log_every == 0:
            log(it, vcl_v, kll_v, tot_v)
    return vf, enc, opt


# ---------------------------------------------------------------------------
# rectified-flow baseline and reflow


def rf_train_step(vf, couplings, rng, cfg, opt):
    t = rng.uniform((len(couplings), 1), 0.0, 1.0, dtype=np.float32)
    with Tape():
        loss = rf_loss(vf, couplings, t)
        loss_v = float(loss.data)
        if not np.isfinite(loss_v):
            raise TrainingDiverged(opt.step_count, loss_v, 0.0, loss_v)
        ad.backward(loss)
    opt.step(cfg.learning_rate)
    opt.zero_grad()
    return loss_v


def rf_train(vf, coupling_source, cfg, opt=None, log=None):
    """Train a velocity field by plain rectified-flow regression.

    `coupling_source(n, rng)` must yield Couplings of a single kind;
    use `pooled_source` to reproduce the data-reuse regimes.
    """
    cfg.validate()
    from .rng import RngStream

    rng = RngStream(cfg.seed)
    if opt is None:
        opt = Optimizer(vf.parameters(), kind=cfg.optimizer)
    for it in range(cfg.iterations):
        batch = coupling_source(cfg.batch_size, rng)
        try:
            loss_v = rf_train_step(vf, batch, rng, cfg, opt)
        except TrainingDiverged as exc:
            exc.iteration = it
            raise
        if log is not None and it % cfg.log_every == 0:
            log(it, loss_v, 0.0, loss_v)
    return vf


def arbitrary_source(target_sampler):
    """Fresh independent (noise, target) pairs every call: no data reuse."""

    def source(n, rng):
        x1 = target_sampler(n, rng)
        x0 = rng.normal(x1.shape)
        return Couplings(x0=x0, x1=x1, kind="arbitrary")

    return source


def pooled_source(pool):
    """Resample batches from a fixed coupling pool (the data-reuse regime)."""

    def source(n, rng):
        idx = rng.integers(0, len(pool), size=n)
        return pool.take(idx)

    return source


def reflow_generate_couplings(pretrained_vf, n, steps, rng):
    """Run the pretrained field from fresh noise; store (noise, endpoint)."""
    from .sampling import integrate

    if steps < 1:
        raise ValueError("steps must be >= 1")
    x0 = rng.normal((n, pretrained_vf.dim))
    states, _ = integrate(pretrained_vf, x0, steps, chain_history=False)
    return Couplings(x0=x0, x1=states[-1].astype(np.float32), kind="deterministic")


def reflow_train(pretrained_vf, cfg, pool_size=None, steps=100, from_scratch=True,
                 log=None):
    """Reflow baseline: regenerate couplings, then train on them.

    `from_scratch=True` (default) reinitializes the field; otherwise the
    pretrained weights are fine-tuned.
    """
    from .rng import RngStream

    cfg.validate()
    gen_rng = RngStream(cfg.seed).child("reflow-pool")
    n_pool = pool_size or cfg.reuse_pool_size or cfg.batch_size * 20
    pool = reflow_generate_couplings(pretrained_vf, n_pool, steps, gen_rng)
    vf = VelocityField(cfg.data_dim, seed=cfg.seed + 17) if from_scratch else pretrained_vf
    return rf_train(vf, pooled_source(pool), cfg, log=log), pool
