"""Branch/trunk operator network for the gain kernels, written directly in numpy.

The branch MLP reads the standardized estimate vector (c1h, c2h, c3h, c4h on
n_s nodes, then rh); the trunk MLP reads a query point (x, xi).  With the
joint layout both end in 2p units and

    Ku_hat = sum_{i <  p} b_i t_i + beta_u
    Km_hat = sum_{i >= p} b_i t_i + beta_m.

With ``separate=True`` each kernel gets its own branch/trunk pair of width p.

Accuracy is reported as the mean over records of the relative L2 error

    || (Ku_hat, Km_hat) - (Ku, Km) ||_2 / || (Ku, Km) ||_2

taken over all triangle nodes of the record.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ContractError, FormatError, TrainingDivergenceError
from .gainkernel import KernelPair
from .numerics import TriGrid

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"KNO1"
ACTIVATIONS = ("relu", "identity")
SCHEDULES = ("constant", "cosine", "exponential")
NORM_MODES = ("channel", "feature")
LOSSES = ("mse", "relative")


@dataclass(frozen=True)
class ArchConfig:
    p: int = 64
    branch_hidden: tuple[int, ...] = (256, 256)
    trunk_hidden: tuple[int, ...] = (128, 128)
    activation: str = "relu"
    separate: bool = False

    def __post_init__(self):
        if self.p < 1 or any(w < 1 for w in (*self.branch_hidden, *self.trunk_hidden)):
            raise ContractError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 600
    batch: int = 256
    split: float = 0.1
    seed: int = 0
    shuffle: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    lr_final: float = 1e-5
    norm: str = "channel"
    loss: str = "mse"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.norm not in NORM_MODES:
            raise ContractError(f"unknown normalization mode {self.norm!r}")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown learning-rate schedule {self.schedule!r}")
        if not 0 < self.split < 1:
            raise ContractError(f"split must lie in (0, 1), got {self.split}")
        if not self.lr > 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0 or self.batch < 1:
            raise ContractError("epochs must be >= 0 and batch >= 1")


@dataclass
class OperatorModel:
    n_s: int
    p: int
    branch_sizes: tuple[int, ...]
    trunk_sizes: tuple[int, ...]
    params: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_scale: np.ndarray
    seed: int = 0
    activation: str = "relu"
    separate: bool = False
    tg_n_points: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n_in = 4 * self.n_s + 1
        width = self.p if self.separate else 2 * self.p
        if self.branch_sizes[0] != n_in or self.trunk_sizes[0] != 2:
            raise ContractError("branch must start at 4*n_s+1 inputs and trunk at 2")
        if self.branch_sizes[-1] != width or self.trunk_sizes[-1] != width:
            raise ContractError(f"branch and trunk must both end at {width} units")
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64)
        self.norm_scale = np.asarray(self.norm_scale, dtype=np.float64)
        if self.norm_mean.shape != (n_in,) or self.norm_scale.shape != (n_in,):
            raise ContractError("normalization statistics must have one entry per input")
        if not np.all(self.norm_scale > 0):
            raise ContractError("normalization scales must be positive")

    @property
    def n_in(self) -> int:
        return 4 * self.n_s + 1

    @property
    def heads(self) -> tuple[str, ...]:
        return ("u.", "m.") if self.separate else ("",)

    def param_names(self) -> list[str]:
        names = []
        for head in self.heads:
            for net, sizes in (("branch", self.branch_sizes), ("trunk", self.trunk_sizes)):
                for k in range(len(sizes) - 1):
                    names += [f"{head}{net}.W{k}", f"{head}{net}.b{k}"]
        return names + ["beta"]

    def n_params(self) -> int:
        return int(sum(self.params[k].size for k in self.param_names()))


# construction ---------------------------------------------------------------

def fit_norm_stats(X, per: str = "channel") -> tuple[np.ndarray, np.ndarray]:
    """Input mean and standard deviation, expanded to one entry per input.

    ``per="channel"`` pools each coefficient field (n_s inputs) and the scalar
    r into one statistic; ``per="feature"`` standardizes every input on its
    own.  Constant groups get scale 1.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("need a nonempty (records, inputs) array")
    if per not in NORM_MODES:
        raise ContractError(f"unknown normalization mode {per!r}")
    if per == "feature":
        mean, std = X.mean(axis=0), X.std(axis=0)
    else:
        n_s, rem = divmod(X.shape[1] - 1, 4)
        if rem or n_s < 1:
            raise ContractError("channel statistics need 4*n_s+1 inputs")
        groups = [slice(k * n_s, (k + 1) * n_s) for k in range(4)] + [slice(4 * n_s, None)]
        mean, std = np.empty(X.shape[1]), np.empty(X.shape[1])
        for g in groups:
            mean[g], std[g] = X[:, g].mean(), X[:, g].std()
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    return mean, np.where(flat, 1.0, std)


def init_model(n_s: int, arch: ArchConfig = ArchConfig(), seed: int = 0,
               norm_mean=None, norm_scale=None, tg_n_points=None) -> OperatorModel:
    """He-normal hidden weights, biases uniform in +-1/sqrt(fan_in), zero output offsets.

    The last layer of each net uses variance 1/(fan_in sqrt(p)) so that the
    inner product of p branch and trunk features starts at unit scale rather
    than growing with p.  Nonzero biases keep the query origin (0, 0), a grid
    node, off the ReLU kinks of the first trunk layer.
    """
    rng = np.random.default_rng(seed)
    width = arch.p if arch.separate else 2 * arch.p
    branch = (4 * n_s + 1, *arch.branch_hidden, width)
    trunk = (2, *arch.trunk_hidden, width)
    params = {}
    heads = ("u.", "m.") if arch.separate else ("",)
    for head in heads:
        for net, sizes in (("branch", branch), ("trunk", trunk)):
            for k in range(len(sizes) - 1):
                fan_in, fan_out = sizes[k], sizes[k + 1]
                last = k == len(sizes) - 2
                var = 1.0 / (fan_in * np.sqrt(arch.p)) if last else 2.0 / fan_in
                params[f"{head}{net}.W{k}"] = rng.normal(0.0, np.sqrt(var), (fan_in, fan_out))
                bound = 1.0 / np.sqrt(fan_in)
                params[f"{head}{net}.b{k}"] = rng.uniform(-bound, bound, fan_out)
    params["beta"] = np.zeros(2)
    n_in = 4 * n_s + 1
    return OperatorModel(
        n_s=n_s, p=arch.p, branch_sizes=branch, trunk_sizes=trunk, params=params,
        norm_mean=np.zeros(n_in) if norm_mean is None else norm_mean,
        norm_scale=np.ones(n_in) if norm_scale is None else norm_scale,
        seed=seed, activation=arch.activation, separate=arch.separate, tg_n_points=tg_n_points,
    )


# forward / backward ----------------------------------------------------------

def _mlp(model, name, X):
    """Returns the output and the list of layer inputs (post-activation)."""
    act = model.activation
    n_layers = len(model.branch_sizes if name.endswith("branch") else model.trunk_sizes) - 1
    acts = [X]
    h = X
    for k in range(n_layers):
        h = h @ model.params[f"{name}.W{k}"] + model.params[f"{name}.b{k}"]
        if k < n_layers - 1 and act == "relu":
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def _mlp_backward(model, name, acts, dout, grads):
    n_layers = len(acts) - 1
    d = dout
    for k in range(n_layers - 1, -1, -1):
        grads[f"{name}.W{k}"] = acts[k].T @ d
        grads[f"{name}.b{k}"] = d.sum(axis=0)
        if k > 0:
            d = d @ model.params[f"{name}.W{k}"].T
            if model.activation == "relu":
                d = d * (acts[k] > 0)


def normalize(model: OperatorModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.n_in:
        raise ContractError(f"estimate vector has length {X.shape[-1]}, model expects {model.n_in}")
    return (X - model.norm_mean) / model.norm_scale


def check_queries(queries) -> np.ndarray:
    Y = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    tol = 1e-9
    x, xi = Y[:, 0], Y[:, 1]
    if np.any(xi < -tol) or np.any(x > 1 + tol) or np.any(xi > x + tol):
        raise ContractError("query point outside the triangle 0 <= xi <= x <= 1")
    return Y


def trunk_basis(model: OperatorModel, queries) -> list[np.ndarray]:
    """Trunk outputs at `queries`, one array per head; reusable across branch inputs."""
    Y = check_queries(queries)
    return [_mlp(model, f"{h}trunk", Y)[0] for h in model.heads]


def _combine(model, bs, ts):
    p = model.p
    beta = model.params["beta"]
    if model.separate:
        return bs[0] @ ts[0].T + beta[0], bs[1] @ ts[1].T + beta[1]
    b, t = bs[0], ts[0]
    return b[:, :p] @ t[:, :p].T + beta[0], b[:, p:] @ t[:, p:].T + beta[1]


def forward_with_basis(model: OperatorModel, est_vectors, basis) -> tuple[np.ndarray, np.ndarray]:
    Xn = normalize(model, np.atleast_2d(est_vectors))
    bs = [_mlp(model, f"{h}branch", Xn)[0] for h in model.heads]
    return _combine(model, bs, basis)


def forward(model: OperatorModel, est_vector, queries) -> tuple[np.ndarray, np.ndarray]:
    """Predicted (Ku, Km) at the query points.

    `est_vector` may be a single vector (outputs of shape (Q,)) or a
    (B, 4*n_s+1) batch (outputs of shape (B, Q)).
    """
    single = np.ndim(est_vector) == 1
    ku, km = forward_with_basis(model, est_vector, trunk_basis(model, queries))
    return (ku[0], km[0]) if single else (ku, km)


def loss_and_grad(model: OperatorModel, X, Y, Tu, Tm, need_grad=True, kind="mse"):
    """Loss over a batch and its gradient w.r.t. every parameter.

    ``kind="mse"`` averages the squared error over all (record, query) pairs.
    ``kind="relative"`` averages, over records with nonzero targets, the
    squared error divided by the record's squared target norm, so every record
    counts alike whatever its kernel magnitude.
    X: (B, n_in) raw estimate vectors, Y: (Q, 2) queries, Tu/Tm: (B, Q) targets.
    """
    if kind not in LOSSES:
        raise ContractError(f"unknown loss {kind!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Tu = np.atleast_2d(np.asarray(Tu, dtype=np.float64))
    Tm = np.atleast_2d(np.asarray(Tm, dtype=np.float64))
    if X.shape[0] == 0 or Tu.size == 0:
        raise ContractError("empty batch")
    Y = check_queries(Y)
    if Tu.shape != (X.shape[0], Y.shape[0]) or Tm.shape != Tu.shape:
        raise ContractError("target shape does not match (records, queries)")
    Xn = normalize(model, X)
    branch = [_mlp(model, f"{h}branch", Xn) for h in model.heads]
    trunk = [_mlp(model, f"{h}trunk", Y) for h in model.heads]
    ku, km = _combine(model, [b[0] for b in branch], [t[0] for t in trunk])
    du, dm = ku - Tu, km - Tm
    if kind == "mse":
        w = np.full((Tu.shape[0], 1), 1.0 / Tu.size)
    else:
        w = _relative_weights(Tu, Tm)
    loss = float(np.sum(w * (du * du + dm * dm)))
    if not need_grad:
        return loss, None
    gu, gm = 2.0 * w * du, 2.0 * w * dm
    grads = {"beta": np.array([gu.sum(), gm.sum()])}
    p = model.p
    if model.separate:
        pairs = [(gu, 0), (gm, 1)]
        for g, k in pairs:
            b, t = branch[k][0], trunk[k][0]
            h = model.heads[k]
            _mlp_backward(model, f"{h}branch", branch[k][1], g @ t, grads)
            _mlp_backward(model, f"{h}trunk", trunk[k][1], g.T @ b, grads)
    else:
        b, t = branch[0][0], trunk[0][0]
        db = np.concatenate([gu @ t[:, :p], gm @ t[:, p:]], axis=1)
        dt = np.concatenate([gu.T @ b[:, :p], gm.T @ b[:, p:]], axis=1)
        _mlp_backward(model, "branch", branch[0][1], db, grads)
        _mlp_backward(model, "trunk", trunk[0][1], dt, grads)
    return loss, grads


def _relative_weights(Tu, Tm):
    """Per-record weights 1/(count * |target|^2); zero-target records get 0."""
    den = np.sum(Tu * Tu, axis=1) + np.sum(Tm * Tm, axis=1)
    live = den > 0
    w = np.zeros(len(den))
    if live.any():
        w[live] = 1.0 / (live.sum() * den[live])
    return w[:, None]


def loss_mse(model: OperatorModel, batch) -> float:
    """Mean of (Ku_hat - Ku)^2 + (Km_hat - Km)^2; `batch` is (X, Y, Tu, Tm)."""
    X, Y, Tu, Tm = batch
    return loss_and_grad(model, X, Y, Tu, Tm, need_grad=False)[0]


def _loss_extended(model: OperatorModel, params, X, Y, Tu, Tm, kind="mse"):
    """The loss recomputed from scratch in extended precision.

    Serves as the finite-difference oracle: it shares no code with the
    float64 forward pass and its round-off is far below float64's.
    """
    ld = np.longdouble
    p = model.p

    def mlp(name, h, n_layers):
        for k in range(n_layers):
            h = h @ params[f"{name}.W{k}"].astype(ld) + params[f"{name}.b{k}"].astype(ld)
            if k < n_layers - 1 and model.activation == "relu":
                h = np.maximum(h, ld(0))
        return h

    Xn = (np.asarray(X, dtype=ld) - model.norm_mean.astype(ld)) / model.norm_scale.astype(ld)
    Yl = np.asarray(Y, dtype=ld)
    nb, nt = len(model.branch_sizes) - 1, len(model.trunk_sizes) - 1
    outs = []
    for h in model.heads:
        outs.append((mlp(f"{h}branch", Xn, nb), mlp(f"{h}trunk", Yl, nt)))
    beta = params["beta"].astype(ld)
    if model.separate:
        ku = outs[0][0] @ outs[0][1].T + beta[0]
        km = outs[1][0] @ outs[1][1].T + beta[1]
    else:
        b, t = outs[0]
        ku = b[:, :p] @ t[:, :p].T + beta[0]
        km = b[:, p:] @ t[:, p:].T + beta[1]
    Tu, Tm = np.asarray(Tu, dtype=ld), np.asarray(Tm, dtype=ld)
    du, dm = ku - Tu, km - Tm
    if kind == "mse":
        return (np.sum(du * du) + np.sum(dm * dm)) / ld(du.size)
    den = np.sum(Tu * Tu, axis=1) + np.sum(Tm * Tm, axis=1)
    live = den > 0
    err = np.sum(du * du, axis=1) + np.sum(dm * dm, axis=1)
    return np.sum(err[live] / den[live]) / ld(max(int(live.sum()), 1))


def grad_check(model: OperatorModel, sample, epsilon_fd: float = 1e-6, n_coords: int = 256,
               seed: int = 0, kind: str = "mse") -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Coordinates are drawn uniformly over all parameters (at least 200).  The
    relative gap is |a - f| / max(|a|, |f|, 1e-8); the difference quotients
    use an extended-precision loss so that round-off does not mask the
    comparison.
    """
    if not 1e-7 <= epsilon_fd <= 1e-4:
        raise ContractError("epsilon_fd must lie in [1e-7, 1e-4]")
    n_coords = max(int(n_coords), 200)
    X, Y, Tu, Tm = sample
    X = np.atleast_2d(X)
    Y = check_queries(Y)
    Tu, Tm = np.atleast_2d(Tu), np.atleast_2d(Tm)
    _, grads = loss_and_grad(model, X, Y, Tu, Tm, kind=kind)
    names = model.param_names()
    sizes = np.array([model.params[k].size for k in names])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    params = {k: model.params[k].astype(np.longdouble) for k in names}
    eps = np.longdouble(epsilon_fd)
    worst = 0.0
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[k], int(flat - offsets[k])
        w = params[name].reshape(-1)
        old = w[idx]
        w[idx] = old + eps
        lp = _loss_extended(model, params, X, Y, Tu, Tm, kind)
        w[idx] = old - eps
        lm = _loss_extended(model, params, X, Y, Tu, Tm, kind)
        w[idx] = old
        fd = float((lp - lm) / (2 * eps))
        an = float(grads[name].reshape(-1)[idx])
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return worst


# metrics and training --------------------------------------------------------

def relative_l2(model: OperatorModel, X, Y, Tu, Tm, chunk: int = 512) -> np.ndarray:
    """Per-record relative L2 error over all queries of both kernels.

    Records whose target kernels are identically zero have no relative error
    and come back as NaN.
    """
    basis = trunk_basis(model, Y)
    out = []
    for s in range(0, len(X), chunk):
        ku, km = forward_with_basis(model, X[s:s + chunk], basis)
        num = np.sum((ku - Tu[s:s + chunk]) ** 2, axis=1) + np.sum((km - Tm[s:s + chunk]) ** 2, axis=1)
        den = np.sum(Tu[s:s + chunk] ** 2, axis=1) + np.sum(Tm[s:s + chunk] ** 2, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out.append(np.where(den > 0, np.sqrt(num / den), np.nan))
    return np.concatenate(out) if out else np.zeros(0)


def mean_relative_l2(model: OperatorModel, X, Y, Tu, Tm) -> float:
    """Mean of :func:`relative_l2` over records with nonzero target kernels."""
    r = relative_l2(model, X, Y, Tu, Tm)
    r = r[np.isfinite(r)]
    return float(r.mean()) if r.size else float("nan")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    test_rel_l2: float = float("nan")
    train_rel_l2: float = float("nan")

    def smoothed(self, which="train", window=10) -> np.ndarray:
        v = np.asarray(getattr(self, f"{which}_loss"))
        if v.size < window:
            return v
        return np.convolve(v, np.ones(window) / window, mode="valid")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step size for `epoch`; the decaying schedules end at `lr_final`."""
    if cfg.schedule == "constant" or cfg.epochs <= 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    if cfg.schedule == "cosine":
        return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fit(model: OperatorModel, train_set, test_set, cfg: TrainConfig,
        callback=None) -> TrainHistory:
    """Adam on ``cfg.loss`` in place; each set is (X, Y, Tu, Tm) with all queries per record.

    Both loss histories use the training objective.
    """
    X, Y, Tu, Tm = train_set
    n = len(X)
    if n == 0:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for s in range(0, n, cfg.batch):
            idx = order[s:s + cfg.batch]
            loss, grads = loss_and_grad(model, X[idx], Y, Tu[idx], Tm[idx], kind=cfg.loss)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"training loss became {loss} at epoch {epoch}", epoch)
            opt.step(model.params, grads)
            total += loss * len(idx)
        hist.train_loss.append(total / n)
        if test_set is not None and len(test_set[0]):
            tl = loss_and_grad(model, *test_set, need_grad=False, kind=cfg.loss)[0]
            if not np.isfinite(tl):
                raise TrainingDivergenceError(f"test loss became {tl} at epoch {epoch}", epoch)
            hist.test_loss.append(tl)
        if callback is not None:
            callback(epoch, hist)
    hist.train_rel_l2 = mean_relative_l2(model, *train_set)
    if test_set is not None and len(test_set[0]):
        hist.test_rel_l2 = mean_relative_l2(model, *test_set)
    return hist


def train(data, cfg: TrainConfig = TrainConfig(), arch: ArchConfig = ArchConfig(),
          callback=None) -> tuple[OperatorModel, TrainHistory]:
    """Split `data` (a :class:`adaptno.dataset.Dataset`), standardize, and fit.

    Normalization statistics come from the training split only.  The output
    offsets start at the training-target means.
    """
    from .dataset import split  # local: dataset depends on the solver stack only

    tr, te = split(data, cfg.split, cfg.seed)
    if len(tr) == 0 or len(te) == 0:
        raise ContractError("split must leave at least one training and one test record")
    mean, scale = fit_norm_stats(tr.X, cfg.norm)
    model = init_model(data.n_s, arch, seed=cfg.seed, norm_mean=mean, norm_scale=scale,
                       tg_n_points=data.tg.n_points)
    model.params["beta"][:] = [tr.Ku.mean(), tr.Km.mean()]
    Y = data.tg.points
    hist = fit(model, (tr.X, Y, tr.Ku, tr.Km), (te.X, Y, te.Ku, te.Km), cfg, callback)
    logger.info("trained %d epochs: test rel L2 %.3e", cfg.epochs, hist.test_rel_l2)
    return model, hist


# kernel source -----------------------------------------------------------------

class NeuralKernels:
    """Kernel source evaluating the operator at the nodes of `tg`.

    The trunk output at those nodes does not depend on the estimates, so it is
    computed once and reused; each call runs only the branch net.
    """

    name = "neural"

    def __init__(self, model: OperatorModel, tg: TriGrid, n_s: int | None = None):
        if n_s is not None and n_s != model.n_s:
            raise ContractError(f"model expects n_s={model.n_s}, estimates have {n_s}")
        self.model, self.tg = model, tg
        self.basis = trunk_basis(model, tg.points)

    def __call__(self, est) -> KernelPair:
        if est.grid.n_points != self.model.n_s:
            raise ContractError(
                f"estimates sampled on {est.grid.n_points} nodes, model expects {self.model.n_s}")
        ku, km = forward_with_basis(self.model, est.vector(), self.basis)
        return KernelPair(ku[0], km[0], self.tg)


# serialization -----------------------------------------------------------------

def _descriptor(model: OperatorModel) -> dict:
    return {
        "kind": "operator-model",
        "n_s": model.n_s,
        "p": model.p,
        "branch_sizes": list(model.branch_sizes),
        "trunk_sizes": list(model.trunk_sizes),
        "activation": model.activation,
        "separate": model.separate,
        "seed": model.seed,
        "tg_n_points": model.tg_n_points,
        "extra": model.extra,
    }


def save_model(model: OperatorModel, path) -> int:
    arrays = {"norm_mean": model.norm_mean, "norm_scale": model.norm_scale}
    for k in model.param_names():
        arrays[k] = model.params[k]
    return container.write(path, MODEL_MAGIC, _descriptor(model), arrays)


def load_model(path) -> OperatorModel:
    desc, arrays = container.read(path, MODEL_MAGIC)
    try:
        model = OperatorModel(
            n_s=int(desc["n_s"]), p=int(desc["p"]),
            branch_sizes=tuple(desc["branch_sizes"]), trunk_sizes=tuple(desc["trunk_sizes"]),
            params={}, norm_mean=arrays["norm_mean"], norm_scale=arrays["norm_scale"],
            seed=int(desc["seed"]), activation=desc["activation"], separate=bool(desc["separate"]),
            tg_n_points=desc.get("tg_n_points"), extra=desc.get("extra", {}),
        )
        for k in model.param_names():
            model.params[k] = arrays[k]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"model descriptor inconsistent with its arrays ({exc})", offset=12) from None
    for head in model.heads:
        for net, sizes in (("branch", model.branch_sizes), ("trunk", model.trunk_sizes)):
            for k in range(len(sizes) - 1):
                if (model.params[f"{head}{net}.W{k}"].shape != (sizes[k], sizes[k + 1])
                        or model.params[f"{head}{net}.b{k}"].shape != (sizes[k + 1],)):
                    raise FormatError(f"layer {head}{net}.{k} has the wrong shape", offset=12)
    if model.params["beta"].shape != (2,):
        raise FormatError("output offsets must have shape (2,)", offset=12)
    for k in model.param_names():
        if not np.all(np.isfinite(model.params[k])):
            raise FormatError(f"non-finite weights in {k}", offset=12)
    return model
