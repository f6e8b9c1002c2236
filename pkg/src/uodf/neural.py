"""Per-direction regression of the orthogonal distance field and its silhouette mask.

Two small dense networks per direction, written out by hand in numpy:

* the distance network maps a 42-d positional encoding of the line plus the
  3-d point to a non-negative distance;
* the mask network maps the line encoding alone to an inside-silhouette logit.

Training needs the derivative of the distance along the line inside the
loss, so the distance network carries a forward-mode tangent with respect to
the along-axis coordinate and backpropagates through both the value and the
tangent (second derivatives of the activation appear there).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

from .field import DirectionalField, query_hits
from .grid import Direction, GridSpec

log = logging.getLogger(__name__)

N_FREQ = 10


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def encoding_dim(n_freq: int = N_FREQ) -> int:
    return 4 * n_freq + 2


def encode_ray(uv: np.ndarray, n_freq: int = N_FREQ) -> np.ndarray:
    """``[u, v, sin(2^k pi u), cos(2^k pi u), sin(2^k pi v), cos(2^k pi v) for k < n_freq]``."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    u, v = uv[:, :1], uv[:, 1:2]
    freq = (2.0 ** np.arange(n_freq)) * np.pi
    au, av = u * freq, v * freq
    feats = np.stack([np.sin(au), np.cos(au), np.sin(av), np.cos(av)], axis=2).reshape(len(uv), -1)
    return np.concatenate([u, v, feats], axis=1)


# ---------------------------------------------------------------------------
# dense network
# ---------------------------------------------------------------------------

def softplus(z, beta):
    return np.logaddexp(0.0, beta * z) / beta


def softplus_d1(z, beta):
    return expit(beta * z)


def softplus_d2(z, beta):
    s = expit(beta * z)
    return beta * s * (1.0 - s)


@dataclass
class Mlp:
    """Dense network with softplus hidden layers; ``out_act`` is ``"softplus"`` or ``"linear"``."""

    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    beta: float = 100.0
    out_act: str = "softplus"

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, beta: float = 100.0, out_act: str = "softplus",
             dtype=np.float64) -> Mlp:
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            bs.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
        return cls(list(sizes), ws, bs, beta, out_act)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def astype(self, dtype) -> Mlp:
        return replace(self, weights=[w.astype(dtype) for w in self.weights],
                       biases=[b.astype(dtype) for b in self.biases])

    def copy(self) -> Mlp:
        return replace(self, weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases])

    def _out(self, z):
        return softplus(z, self.beta) if self.out_act == "softplus" else z

    def forward(self, x: np.ndarray, keep: bool = False):
        a = x
        acts, pre = [x], []
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = self._out(z) if i == n - 1 else softplus(z, self.beta)
            if keep:
                pre.append(z)
                acts.append(a)
        y = a[:, 0]
        return (y, (acts, pre)) if keep else y

    def backward(self, cache, gy: np.ndarray) -> list[np.ndarray]:
        acts, pre = cache
        n = len(self.weights)
        ga = gy[:, None]
        grads = [None] * (2 * n)
        for i in reversed(range(n)):
            z = pre[i]
            if i == n - 1 and self.out_act == "linear":
                gz = ga
            else:
                gz = ga * softplus_d1(z, self.beta)
            grads[2 * i] = acts[i].T @ gz
            grads[2 * i + 1] = gz.sum(0)
            if i:
                ga = gz @ self.weights[i].T
        return grads

    def forward_tangent(self, x: np.ndarray, col: int, keep: bool = False):
        """Value and derivative with respect to input column ``col``."""
        n = len(self.weights)
        a = x
        ta = None  # tangent of the input is the unit vector e_col
        acts, tans, pre, tpre = [x], [None], [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            tz = np.broadcast_to(w[col], z.shape) if ta is None else ta @ w
            if i == n - 1 and self.out_act == "linear":
                a, ta = z, tz
            else:
                a = softplus(z, self.beta)
                ta = softplus_d1(z, self.beta) * tz
            if keep:
                pre.append(z)
                tpre.append(tz)
                acts.append(a)
                tans.append(ta)
        y, ty = a[:, 0], ta[:, 0]
        if keep:
            return y, ty, (acts, tans, pre, tpre, col)
        return y, ty

    def backward_tangent(self, cache, gy: np.ndarray, gty: np.ndarray) -> list[np.ndarray]:
        """Weight gradients of a loss depending on both the value and its input tangent."""
        acts, tans, pre, tpre, col = cache
        n = len(self.weights)
        ga, gta = gy[:, None], gty[:, None]
        grads = [None] * (2 * n)
        for i in reversed(range(n)):
            z, tz = pre[i], tpre[i]
            if i == n - 1 and self.out_act == "linear":
                gz, gtz = ga, gta
            else:
                d1 = softplus_d1(z, self.beta)
                gz = ga * d1 + gta * softplus_d2(z, self.beta) * tz
                gtz = gta * d1
            gw = acts[i].T @ gz
            if i == 0:
                gw[col] += gtz.sum(0)
            else:
                gw += tans[i].T @ gtz
            grads[2 * i] = gw
            grads[2 * i + 1] = gz.sum(0)
            if i:
                w = self.weights[i]
                ga = gz @ w.T
                gta = gtz @ w.T
        return grads


# ---------------------------------------------------------------------------
# model and config
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 1024
    lr: float = 1e-3
    lr_halve_every: int = 20
    lattice: int = 257
    points_per_ray: int = 256
    resample_every: int = 10
    lambda_value: float = 3000.0
    lambda_der: float = 50.0
    lambda_pred: float = 1000.0
    width: int = 256
    uodf_layers: int = 10  # linear layers, so uodf_layers - 1 hidden layers of ``width``
    mask_layers: int = 3
    beta: float = 100.0
    n_freq: int = N_FREQ
    mask_threshold: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs", "batch", "lattice", "points_per_ray", "resample_every", "width",
                     "uodf_layers", "mask_layers", "lr_halve_every"):
            v = getattr(self, name)
            if v < 0 or (v == 0 and name != "epochs"):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.lr <= 0 or min(self.lambda_value, self.lambda_der, self.lambda_pred) < 0:
            raise ValueError("learning rate must be positive and loss weights non-negative")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return self.lambda_value, self.lambda_der, self.lambda_pred

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.lr_halve_every)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class MlpModel:
    direction: Direction
    uodf: Mlp
    mask: Mlp
    n_freq: int = N_FREQ
    seed: int = 0
    epoch: int = 0

    @classmethod
    def init(cls, direction, cfg: TrainConfig = TrainConfig(), dtype=None) -> MlpModel:
        direction = Direction.parse(direction)
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(dtype or cfg.dtype)
        enc = encoding_dim(cfg.n_freq)
        uodf = Mlp.init([enc + 3] + [cfg.width] * (cfg.uodf_layers - 1) + [1], rng, cfg.beta, "softplus", dtype)
        mask = Mlp.init([enc] + [cfg.width] * (cfg.mask_layers - 1) + [1], rng, cfg.beta, "linear", dtype)
        return cls(direction, uodf, mask, cfg.n_freq, cfg.seed, 0)

    @property
    def n_params(self) -> int:
        return self.uodf.n_params + self.mask.n_params

    @property
    def dtype(self):
        return self.uodf.weights[0].dtype

    def inputs(self, uv: np.ndarray, s: np.ndarray, enc: np.ndarray | None = None) -> np.ndarray:
        uv = np.atleast_2d(uv)
        if enc is None:
            enc = encode_ray(uv, self.n_freq)
        ua, va = self.direction.plane_axes
        xyz = np.empty((len(uv), 3))
        xyz[:, ua] = uv[:, 0]
        xyz[:, va] = uv[:, 1]
        xyz[:, self.direction.axis] = s
        return np.concatenate([enc, xyz], axis=1).astype(self.dtype, copy=False)

    @property
    def axis_column(self) -> int:
        return encoding_dim(self.n_freq) + self.direction.axis

    def forward_uodf(self, uv: np.ndarray, s: np.ndarray):
        """Predicted distance and its exact derivative along the line direction."""
        return self.uodf.forward_tangent(self.inputs(uv, s), self.axis_column)

    def mask_prob(self, uv: np.ndarray) -> np.ndarray:
        return expit(self.mask.forward(encode_ray(uv, self.n_freq).astype(self.dtype)))


def forward_uodf(model: MlpModel, uv, s):
    return model.forward_uodf(np.atleast_2d(uv), np.atleast_1d(s))


# ---------------------------------------------------------------------------
# ground-truth sampler and losses
# ---------------------------------------------------------------------------

@dataclass
class RaySampler:
    """Exact distances at arbitrary positions on a fixed set of lattice lines."""

    direction: Direction
    lattice: GridSpec
    hit_values: np.ndarray
    hit_offsets: np.ndarray
    lines: np.ndarray  # lattice line ids available for training (r = iv * R + iu)

    @classmethod
    def from_shape(cls, shape, lattice: GridSpec, direction, lines: np.ndarray | None = None) -> RaySampler:
        direction = Direction.parse(direction)
        u, v = lattice.plane_lattice()
        hv, ho = shape.axis_hits(direction.axis, u, v)
        if lines is None:
            lines = np.arange(lattice.resolution ** 2)
        return cls(direction, lattice, np.asarray(hv, np.float64), np.asarray(ho, np.int64), np.asarray(lines))

    @classmethod
    def from_field(cls, fld: DirectionalField, lines: np.ndarray | None = None) -> RaySampler:
        if lines is None:
            lines = np.arange(fld.resolution ** 2)
        return cls(fld.direction, fld.grid, fld.hit_values, fld.hit_offsets, np.asarray(lines))

    def uv(self, lines: np.ndarray) -> np.ndarray:
        c = self.lattice.coords
        R = self.lattice.resolution
        return np.stack([c[lines % R], c[lines // R]], axis=1)

    def defined(self, lines: np.ndarray) -> np.ndarray:
        return np.diff(self.hit_offsets)[lines] > 0

    @property
    def masked_lines(self) -> np.ndarray:
        return self.lines[self.defined(self.lines)]

    def query(self, lines: np.ndarray, s: np.ndarray):
        return query_hits(self.hit_values, self.hit_offsets, lines, s)


@dataclass
class LossTerms:
    value: float
    der: float
    pred: float
    total: float
    excluded: int = 0


def weighted_total(value: float, der: float, pred: float, lambdas=(3000.0, 50.0, 1000.0)) -> float:
    l1, l2, l3 = lambdas
    return l1 * value + l2 * der + l3 * pred


def _sgn(x):
    return np.where(x >= 0, 1.0, -1.0)


def loss_terms(predict: Callable, sampler: RaySampler, lines: np.ndarray, s: np.ndarray,
               lambdas=(3000.0, 50.0, 1000.0), with_grads: bool = False):
    """Composite loss on a batch of points.

    ``predict(lines, s) -> (value, d value / d s)``. The predicted surface
    point ``s - sign(d value / d s) * value`` is scored with the exact field.
    Points on lines without crossings are dropped and counted. With
    ``with_grads`` also returns d loss / d value and d loss / d derivative.
    """
    lines = np.asarray(lines)
    s = np.asarray(s, dtype=np.float64)
    ok = sampler.defined(lines)
    excluded = int((~ok).sum())
    if excluded:
        log.debug("dropping %d points on undefined lines", excluded)
        lines, s = lines[ok], s[ok]
    y, ty = predict(lines, s)
    y = np.asarray(y, dtype=np.float64)
    ty = np.asarray(ty, dtype=np.float64)
    gt, _ = sampler.query(lines, s)
    direction = _sgn(ty)
    s_hat = s - direction * y
    at_hat, sign_hat = sampler.query(lines, s_hat)
    n = max(len(s), 1)
    l_value = float(np.abs(y - gt).mean()) if len(s) else 0.0
    l_der = float(np.abs(np.abs(ty) - 1.0).mean()) if len(s) else 0.0
    l_pred = float(np.abs(at_hat).mean()) if len(s) else 0.0
    terms = LossTerms(l_value, l_der, l_pred, weighted_total(l_value, l_der, l_pred, lambdas), excluded)
    if not with_grads:
        return terms
    l1, l2, l3 = lambdas
    # d|UODF(s_hat)|/dy = sign'(s_hat) * d s_hat/dy, with d s_hat/dy = -direction
    gy = (l1 * np.sign(y - gt) + l3 * sign_hat * -direction) / n
    gty = l2 * np.sign(np.abs(ty) - 1.0) * np.sign(ty) / n
    return terms, gy, gty, (lines, s)


def mask_loss(model: MlpModel, uv: np.ndarray, labels: np.ndarray, keep: bool = False):
    """Binary cross-entropy of the mask logits against {0, 1} labels."""
    x = encode_ray(uv, model.n_freq).astype(model.dtype)
    z, cache = model.mask.forward(x, keep=True)
    z = z.astype(np.float64)
    loss = float(np.mean(np.logaddexp(0.0, z) - labels * z))
    if not keep:
        return loss
    return loss, (expit(z) - labels) / len(z), cache


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, msg, model: MlpModel, history: list):
        super().__init__(msg)
        self.model = model
        self.history = history


class Adam:
    def __init__(self, params: list[np.ndarray], b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, grads, lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def _mlp_predict(model: MlpModel, sampler: RaySampler, enc_table: dict):
    def predict(lines, s):
        enc = enc_table["enc"][enc_table["index"][lines]]
        x = model.inputs(sampler.uv(lines), s, enc)
        y, ty, cache = model.uodf.forward_tangent(x, model.axis_column, keep=True)
        predict.cache = cache
        return y, ty
    return predict


@dataclass
class EpochLog:
    epoch: int
    lr: float
    value: float
    der: float
    pred: float
    total: float
    mask_bce: float
    best_total: float


def train_direction(sampler: RaySampler, cfg: TrainConfig = TrainConfig(),
                    model: MlpModel | None = None, callback: Callable | None = None):
    """Fit one direction. Returns ``(model, history)``.

    Raises :class:`TrainingDiverged` carrying the last finite model if a
    loss turns non-finite.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    model = model or MlpModel.init(sampler.direction, cfg)
    history: list[EpochLog] = []
    if cfg.epochs == 0:
        return model, history

    lines_all = sampler.lines
    enc_index = np.full(sampler.lattice.resolution ** 2, -1, dtype=np.int64)
    enc_index[lines_all] = np.arange(len(lines_all))
    enc_table = {"enc": encode_ray(sampler.uv(lines_all), model.n_freq), "index": enc_index}
    labels_all = sampler.defined(lines_all).astype(np.float64)
    train_lines = sampler.masked_lines

    opt_u = Adam(model.uodf.params)
    opt_m = Adam(model.mask.params)
    predict = _mlp_predict(model, sampler, enc_table)
    good = (model.uodf.copy(), model.mask.copy())
    best = math.inf
    pts_lines = pts_s = None

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        if epoch % cfg.resample_every == 0 or pts_lines is None:
            pts_lines = np.repeat(train_lines, cfg.points_per_ray)
            pts_s = rng.uniform(-1.0, 1.0, len(pts_lines))
        perm = rng.permutation(len(pts_lines))
        sums = np.zeros(4)
        n_batches = 0
        bce_sum = 0.0
        for lo in range(0, len(perm), cfg.batch):
            idx = perm[lo:lo + cfg.batch]
            terms, gy, gty, _ = loss_terms(predict, sampler, pts_lines[idx], pts_s[idx], cfg.lambdas, True)
            if not math.isfinite(terms.total):
                break
            grads = model.uodf.backward_tangent(predict.cache, gy.astype(model.dtype), gty.astype(model.dtype))
            opt_u.step(grads, lr)
            sums += (terms.value, terms.der, terms.pred, terms.total)
            # one mask step per distance step, lines drawn with replacement
            midx = rng.integers(0, len(lines_all), min(cfg.batch, len(lines_all)))
            loss, gz, cache = mask_loss(model, sampler.uv(lines_all[midx]), labels_all[midx], keep=True)
            opt_m.step(model.mask.backward(cache, gz.astype(model.dtype)), lr)
            bce_sum += loss
            n_batches += 1

        mean = sums / max(n_batches, 1)
        finite = n_batches * cfg.batch >= min(len(perm), cfg.batch) and np.all(np.isfinite(mean)) \
            and math.isfinite(bce_sum) and all(np.isfinite(p).all() for p in model.uodf.params + model.mask.params)
        if not finite:
            model.uodf, model.mask = good
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model, history)
        good = (model.uodf.copy(), model.mask.copy())
        best = min(best, float(mean[3]))
        model.epoch = epoch + 1
        entry = EpochLog(epoch, lr, *map(float, mean), bce_sum / max(n_batches, 1), best)
        history.append(entry)
        log.info("epoch %d lr %.2e L_all %.4f (value %.5f der %.4f pred %.5f) bce %.4f",
                 epoch, lr, entry.total, entry.value, entry.der, entry.pred, entry.mask_bce)
        if callback is not None:
            callback(entry, model)
    return model, history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_field(model: MlpModel, grid: GridSpec, threshold: float = 0.5, chunk: int = 65536) -> DirectionalField:
    """Evaluate the networks at every lattice corner of ``grid`` to form a directional field."""
    R = grid.resolution
    u, v = grid.plane_lattice()
    uv = np.stack([u, v], axis=1)
    mask = model.mask_prob(uv) > threshold
    dist = np.full((R * R, R), np.nan)
    sign = np.zeros((R * R, R), dtype=np.int8)
    lines = np.flatnonzero(mask)
    if len(lines):
        all_lines = np.repeat(lines, R)
        all_s = np.tile(grid.coords, len(lines))
        ys, tys = [], []
        for lo in range(0, len(all_lines), chunk):
            sl = slice(lo, lo + chunk)
            y, ty = model.forward_uodf(uv[all_lines[sl]], all_s[sl])
            ys.append(y)
            tys.append(ty)
        y = np.concatenate(ys).astype(np.float64)
        ty = np.concatenate(tys)
        dist[lines] = y.reshape(-1, R)
        sign[lines] = np.where(ty >= 0, 1, -1).reshape(-1, R)
    return DirectionalField(
        direction=model.direction, grid=grid, mask=mask.reshape(R, R),
        distances=dist.reshape(R, R, R), deriv_sign=sign.reshape(R, R, R),
        hit_values=np.zeros(0), hit_offsets=np.zeros(R * R + 1, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: MlpModel, path) -> None:
    """Little-endian f32 weight blob at ``path`` plus a JSON sidecar ``path.json``."""
    path = Path(path)
    blob = np.concatenate([p.ravel() for p in model.uodf.params + model.mask.params]).astype("<f4")
    path.write_bytes(blob.tobytes())
    meta = {
        "direction": model.direction.name,
        "uodf_sizes": model.uodf.sizes,
        "mask_sizes": model.mask.sizes,
        "activation": "softplus",
        "beta": model.uodf.beta,
        "n_freq": model.n_freq,
        "seed": model.seed,
        "epoch": model.epoch,
        "n_params": model.n_params,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path, dtype=np.float32) -> MlpModel:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    blob = np.frombuffer(path.read_bytes(), dtype="<f4").astype(dtype)
    pos = 0

    def take(sizes, out_act):
        nonlocal pos
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(blob[pos:pos + a * b].reshape(a, b).copy())
            pos += a * b
            bs.append(blob[pos:pos + b].copy())
            pos += b
        return Mlp(list(sizes), ws, bs, meta["beta"], out_act)

    uodf = take(meta["uodf_sizes"], "softplus")
    mask = take(meta["mask_sizes"], "linear")
    if pos != len(blob):
        raise ValueError(f"{path}: weight blob has {len(blob)} values, sidecar describes {pos}")
    return MlpModel(Direction[meta["direction"]], uodf, mask, meta["n_freq"], meta["seed"], meta["epoch"])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
