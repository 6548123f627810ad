"""Two-stage 1-D convolutional autoencoder that emits one latent feature.

Layout of one input: rows are the objective and its k neighbors (the
sequence axis), columns are the p features plus the label (channels).

encoder   conv k=1 -> conv k=1 -> conv k=3 -> dense -> latent scalar
decoder   dense -> tconv k=3 -> tconv k=1 -> tconv k=1 -> (k+1, p+1)
estimator latent -> w * latent + b   (one unit per estimator output)

Training alternates between a reconstruction stage (encoder + decoder)
and an estimation stage (encoder + estimator). Gradients are exact
backpropagation through hand-written layers; updates use Adam.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DataError, Dataset
from .neighborhood import CloudSet, LdfBatch, LdfInput, assemble_batch

CHECKPOINT_VERSION = 1
RECON = "reconstruction"
ESTIM = "estimation"
_STAGE_CODES = {"r": RECON, "e": ESTIM}


class DivergenceError(RuntimeError):
    """Training produced a non-finite or exploding loss."""


@dataclass(frozen=True)
class ArchConfig:
    k: int = 12
    p: int = 8
    conv_channels: tuple = (32, 16, 8)
    conv_kernel_sizes: tuple = (1, 1, 3)
    latent_dim: int = 1
    leaky_slope: float = 0.01
    estimator_outputs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_kernel_sizes", tuple(self.conv_kernel_sizes))
        if self.conv_kernel_sizes != (1, 1, 3):
            raise ValueError("conv_kernel_sizes is fixed at (1, 1, 3)")
        if self.latent_dim != 1:
            raise ValueError("latent_dim is fixed at 1")
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise ValueError("conv_channels needs three positive integers")
        if self.k < 1 or self.p < 1:
            raise ValueError("k and p must be positive")
        if self.estimator_outputs not in (1, 2):
            raise ValueError("estimator_outputs must be 1 (LDF) or 2 (LDF-A)")

    @property
    def input_shape(self) -> tuple:
        return (self.k + 1, self.p + 1)


def _param_shapes(arch: ArchConfig) -> dict:
    R, C = arch.input_shape
    c1, c2, c3 = arch.conv_channels
    n = arch.estimator_outputs
    return {
        "enc1_w": (C, c1), "enc1_b": (c1,),
        "enc2_w": (c1, c2), "enc2_b": (c2,),
        "enc3_w": (3, c2, c3), "enc3_b": (c3,),
        "encd_w": (R * c3,), "encd_b": (1,),
        "decd_w": (R * c3,), "decd_b": (R * c3,),
        "dec1_w": (3, c3, c2), "dec1_b": (c2,),
        "dec2_w": (c2, c1), "dec2_b": (c1,),
        "dec3_w": (c1, C), "dec3_b": (C,),
        "est_w": (n,), "est_b": (n,),
    }


# (fan_in, fan_out) used for Glorot-uniform initialisation
def _fans(name: str, shape: tuple) -> tuple:
    if name in ("enc3_w", "dec1_w"):
        return shape[1] * 3, shape[2] * 3
    if name == "encd_w":
        return shape[0], 1
    if name == "decd_w":
        return 1, shape[0]
    if name == "est_w":
        return 1, 1
    return shape[0], shape[1]


ENCODER = ("enc1_w", "enc1_b", "enc2_w", "enc2_b", "enc3_w", "enc3_b", "encd_w", "encd_b")
DECODER = ("decd_w", "decd_b", "dec1_w", "dec1_b", "dec2_w", "dec2_b", "dec3_w", "dec3_b")
ESTIMATOR = ("est_w", "est_b")
STAGE_PARAMS = {RECON: ENCODER + DECODER, ESTIM: ENCODER + ESTIMATOR}


@dataclass
class AutoencoderModel:
    arch: ArchConfig
    params: dict

    def copy(self) -> "AutoencoderModel":
        return AutoencoderModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in _param_shapes(self.arch)])

    @classmethod
    def from_flat(cls, arch: ArchConfig, vec) -> "AutoencoderModel":
        vec = np.asarray(vec, dtype=np.float64)
        params, pos = {}, 0
        for name, shape in _param_shapes(arch).items():
            size = int(np.prod(shape))
            params[name] = vec[pos : pos + size].reshape(shape).copy()
            pos += size
        if pos != vec.size:
            raise DataError(f"parameter vector has {vec.size} entries, expected {pos}")
        return cls(arch, params)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in _param_shapes(self.arch).values())


def init_model(arch: ArchConfig, seed: int, zero: bool = False) -> AutoencoderModel:
    """Glorot-uniform weights, zero biases. ``zero=True`` zeroes everything."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(arch).items():
        if zero or name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            a = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
    return AutoencoderModel(arch, params)


# -- layers --------------------------------------------------------------------


def _act(a, slope):
    return np.where(a > 0, a, slope * a)


def _dact(a, slope):
    return np.where(a > 0, 1.0, slope)


def _pad(h):
    return np.pad(h, ((0, 0), (1, 1), (0, 0)))


def _conv3(h, W):
    # out[r] = h[r-1] W0 + h[r] W1 + h[r+1] W2
    R = h.shape[1]
    hp = _pad(h)
    return sum(hp[:, t : t + R] @ W[t] for t in range(3))


def _conv3_back(h, W, g):
    R = h.shape[1]
    hp = _pad(h)
    dW = np.stack([np.einsum("brc,brd->cd", hp[:, t : t + R], g) for t in range(3)])
    dhp = np.zeros_like(hp)
    for t in range(3):
        dhp[:, t : t + R] += g @ W[t].T
    return dhp[:, 1:-1], dW


def _tconv3(h, W):
    # transpose of _conv3: out[r] = h[r+1] W0 + h[r] W1 + h[r-1] W2
    R = h.shape[1]
    hp = _pad(h)
    return sum(hp[:, 2 - t : 2 - t + R] @ W[t] for t in range(3))


def _tconv3_back(h, W, g):
    R = h.shape[1]
    hp = _pad(h)
    dW = np.stack([np.einsum("brc,brd->cd", hp[:, 2 - t : 2 - t + R], g) for t in range(3)])
    dhp = np.zeros_like(hp)
    for t in range(3):
        dhp[:, 2 - t : 2 - t + R] += g @ W[t].T
    return dhp[:, 1:-1], dW


def _as_array(inputs) -> np.ndarray:
    if isinstance(inputs, LdfBatch):
        return inputs.tensors
    if isinstance(inputs, LdfInput):
        return inputs.tensor[None]
    X = np.asarray(inputs, dtype=np.float64)
    return X[None] if X.ndim == 2 else X


def _check_shape(model: AutoencoderModel, X: np.ndarray) -> None:
    if X.shape[1:] != model.arch.input_shape:
        raise DataError(
            f"input shape {X.shape[1:]} does not match architecture {model.arch.input_shape}"
        )


def _encode(P, X, slope):
    a1 = X @ P["enc1_w"] + P["enc1_b"]
    h1 = _act(a1, slope)
    a2 = h1 @ P["enc2_w"] + P["enc2_b"]
    h2 = _act(a2, slope)
    a3 = _conv3(h2, P["enc3_w"]) + P["enc3_b"]
    h3 = _act(a3, slope)
    z = h3.reshape(X.shape[0], -1) @ P["encd_w"] + P["encd_b"][0]
    return z, (X, a1, h1, a2, h2, a3, h3)


def _decode(P, z, shape, slope):
    B = z.shape[0]
    R, C = shape
    c3 = P["dec1_w"].shape[1]
    d0 = (z[:, None] * P["decd_w"] + P["decd_b"]).reshape(B, R, c3)
    g0 = _act(d0, slope)
    d1 = _tconv3(g0, P["dec1_w"]) + P["dec1_b"]
    g1 = _act(d1, slope)
    d2 = g1 @ P["dec2_w"] + P["dec2_b"]
    g2 = _act(d2, slope)
    out = g2 @ P["dec3_w"] + P["dec3_b"]
    return out, (d0, g0, d1, g1, d2, g2)


def _estimate(P, z):
    return z[:, None] * P["est_w"] + P["est_b"]


def _backward(P, slope, enc_cache, z, dec_cache, d_out, d_est) -> dict:
    """Gradients of a loss whose derivative w.r.t. the decoder output is
    ``d_out`` and w.r.t. the estimator output is ``d_est`` (either may be None)."""
    X, a1, h1, a2, h2, a3, h3 = enc_cache
    B = X.shape[0]
    grads = {}
    dz = np.zeros(B)
    if d_est is not None:
        grads["est_w"] = (d_est * z[:, None]).sum(0)
        grads["est_b"] = d_est.sum(0)
        dz += d_est @ P["est_w"]
    if d_out is not None:
        d0, g0, d1, g1, d2, g2 = dec_cache
        grads["dec3_w"] = np.einsum("brc,brd->cd", g2, d_out)
        grads["dec3_b"] = d_out.sum((0, 1))
        dd2 = (d_out @ P["dec3_w"].T) * _dact(d2, slope)
        grads["dec2_w"] = np.einsum("brc,brd->cd", g1, dd2)
        grads["dec2_b"] = dd2.sum((0, 1))
        dd1 = (dd2 @ P["dec2_w"].T) * _dact(d1, slope)
        dg0, grads["dec1_w"] = _tconv3_back(g0, P["dec1_w"], dd1)
        grads["dec1_b"] = dd1.sum((0, 1))
        dd0 = (dg0 * _dact(d0, slope)).reshape(B, -1)
        grads["decd_w"] = dd0.T @ z
        grads["decd_b"] = dd0.sum(0)
        dz += dd0 @ P["decd_w"]
    grads["encd_w"] = h3.reshape(B, -1).T @ dz
    grads["encd_b"] = np.array([dz.sum()])
    da3 = (dz[:, None] * P["encd_w"]).reshape(h3.shape) * _dact(a3, slope)
    grads["enc3_b"] = da3.sum((0, 1))
    dh2, grads["enc3_w"] = _conv3_back(h2, P["enc3_w"], da3)
    da2 = dh2 * _dact(a2, slope)
    grads["enc2_w"] = np.einsum("brc,brd->cd", h1, da2)
    grads["enc2_b"] = da2.sum((0, 1))
    da1 = (da2 @ P["enc2_w"].T) * _dact(a1, slope)
    grads["enc1_w"] = np.einsum("brc,brd->cd", X, da1)
    grads["enc1_b"] = da1.sum((0, 1))
    return grads


# -- public forward API --------------------------------------------------------


def encode_batch(model: AutoencoderModel, inputs) -> np.ndarray:
    X = _as_array(inputs)
    _check_shape(model, X)
    z, _ = _encode(model.params, X, model.arch.leaky_slope)
    return z


def encode(model: AutoencoderModel, inputs) -> float:
    """Latent value (the LDF) of one input."""
    z = encode_batch(model, inputs)
    if z.shape[0] != 1:
        raise DataError("encode takes a single input; use encode_batch")
    return float(z[0])


def decode(model: AutoencoderModel, latent) -> np.ndarray:
    """Reconstruction(s) of shape (k+1, p+1) for scalar or vector latents."""
    z = np.atleast_1d(np.asarray(latent, dtype=np.float64))
    out, _ = _decode(model.params, z, model.arch.input_shape, model.arch.leaky_slope)
    return out[0] if np.ndim(latent) == 0 else out


def estimate(model: AutoencoderModel, latent) -> np.ndarray:
    """Estimator outputs ``w_i * latent + b_i``."""
    z = np.atleast_1d(np.asarray(latent, dtype=np.float64))
    out = _estimate(model.params, z)
    return out[0] if np.ndim(latent) == 0 else out


def _targets(batch: LdfBatch, n_out: int) -> np.ndarray:
    if n_out == 1:
        return batch.target_labels[:, None]
    if batch.aux_labels is None:
        raise DataError("a two-output estimator needs aux labels")
    return np.column_stack([batch.target_labels, batch.aux_labels])


def stage_loss_and_grads(model: AutoencoderModel, X, Y, stage: str, need_grad: bool = True):
    """Mean squared loss of ``stage`` on tensors ``X`` and estimator targets ``Y``."""
    P, slope = model.params, model.arch.leaky_slope
    z, enc_cache = _encode(P, X, slope)
    if stage == RECON:
        out, dec_cache = _decode(P, z, model.arch.input_shape, slope)
        r = out - X
        loss = float(np.mean(r**2))
        if not need_grad:
            return loss, None
        grads = _backward(P, slope, enc_cache, z, dec_cache, 2.0 * r / r.size, None)
    elif stage == ESTIM:
        e = _estimate(P, z) - Y
        loss = float(np.mean(e**2))
        if not need_grad:
            return loss, None
        grads = _backward(P, slope, enc_cache, z, None, None, 2.0 * e / e.size)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return loss, grads


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    # stage pattern cycled over epochs: 'r' reconstruction, 'e' estimation
    alternation: str = "re"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("invalid training configuration")
        if not self.alternation or set(self.alternation) - set(_STAGE_CODES):
            raise ValueError("alternation must be a non-empty string over {'r', 'e'}")

    def stage(self, epoch: int) -> str:
        return _STAGE_CODES[self.alternation[epoch % len(self.alternation)]]


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1**t)
            vhat = self.v[name] / (1 - self.beta2**t)
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class LossHistory:
    epochs: list = field(default_factory=list)  # (epoch, stage, loss)
    initial: dict = field(default_factory=dict)  # stage -> loss before training

    def stage_losses(self, stage: str) -> list:
        return [loss for _, s, loss in self.epochs if s == stage]


def _divergence_check(loss: float, initial: float, where: str) -> None:
    if not math.isfinite(loss) or loss > 1e6 * max(initial, 1e-12):
        raise DivergenceError(f"{where}: loss diverged ({loss!r}, initial {initial!r})")


def train(model: AutoencoderModel, inputs, cfg: TrainConfig):
    """Alternating two-stage training. Returns (trained copy, LossHistory).

    Only the parameters of the active stage are updated in an epoch.
    The recorded loss of an epoch is the full-data loss of its stage
    after the epoch's updates.
    """
    batch = inputs if isinstance(inputs, LdfBatch) else LdfBatch.stack(list(inputs))
    if len(batch) == 0:
        raise DataError("no training inputs")
    if cfg.epochs < 2:
        raise ValueError("epochs must be >= 2 so that both stages run")
    model = model.copy()
    X = batch.tensors
    _check_shape(model, X)
    Y = _targets(batch, model.arch.estimator_outputs)
    n = X.shape[0]
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    hist = LossHistory()
    for stage in (RECON, ESTIM):
        hist.initial[stage] = stage_loss_and_grads(model, X, Y, stage, need_grad=False)[0]
        _divergence_check(hist.initial[stage], hist.initial[stage], "initial " + stage)

    for epoch in range(cfg.epochs):
        stage = cfg.stage(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = stage_loss_and_grads(model, X[idx], Y[idx], stage)
            _divergence_check(loss, hist.initial[stage], f"epoch {epoch} ({stage})")
            if cfg.learning_rate > 0:
                opt.step(model.params, grads)
        loss = stage_loss_and_grads(model, X, Y, stage, need_grad=False)[0]
        _divergence_check(loss, hist.initial[stage], f"epoch {epoch} ({stage})")
        hist.epochs.append((epoch, stage, loss))
    return model, hist


def _fd_losses(P, X, Y, stage, arch):
    """Loss and pre-activation sign pattern for a stack of parameter sets.

    Every ``P[name]`` carries a leading axis of length 1 or N (the
    perturbed tensor); the result has one loss and one sign row per set.
    Arithmetic follows the dtype of ``P`` (extended precision here).
    """
    slope = arch.leaky_slope
    R, C = arch.input_shape
    B = X.shape[0]

    def mat(name):
        return P[name][:, None]

    def vec(name):
        return P[name][:, None, None]

    def conv(h, W, transpose):
        hp = np.pad(h, ((0, 0), (0, 0), (1, 1), (0, 0)))
        if transpose:
            return sum(hp[:, :, 2 - t : 2 - t + R] @ W[:, t][:, None] for t in range(3))
        return sum(hp[:, :, t : t + R] @ W[:, t][:, None] for t in range(3))

    a1 = X[None] @ mat("enc1_w") + vec("enc1_b")
    a2 = _act(a1, slope) @ mat("enc2_w") + vec("enc2_b")
    a3 = conv(_act(a2, slope), P["enc3_w"], False) + vec("enc3_b")
    h3 = _act(a3, slope)
    z = (h3.reshape(h3.shape[0], B, -1) * P["encd_w"][:, None]).sum(-1) + P["encd_b"][:, :1]
    pre = [a1, a2, a3]
    if stage == RECON:
        d0 = z[..., None] * P["decd_w"][:, None] + P["decd_b"][:, None]
        d0 = d0.reshape(d0.shape[0], B, R, -1)
        d1 = conv(_act(d0, slope), P["dec1_w"], True) + vec("dec1_b")
        d2 = _act(d1, slope) @ mat("dec2_w") + vec("dec2_b")
        out = _act(d2, slope) @ mat("dec3_w") + vec("dec3_b")
        pre += [d0, d1, d2]
        loss = np.mean((out - X[None]) ** 2, axis=(1, 2, 3))
    else:
        est = z[..., None] * P["est_w"][:, None] + P["est_b"][:, None]
        loss = np.mean((est - Y[None]) ** 2, axis=(1, 2))
    n = loss.shape[0]
    signs = np.concatenate([np.broadcast_to(a > 0, (n,) + a.shape[1:]).reshape(n, -1) for a in pre], axis=1)
    return loss, signs


def gradient_check(model: AutoencoderModel, inputs, target, h: float = 1e-4) -> float:
    """Worst relative gap between backprop and central differences.

    Covers every parameter under both the reconstruction and the
    estimation loss of a single input (or small batch). The difference
    quotients are evaluated in extended precision, all coordinates of a
    tensor in one batched pass. A step that moves any pre-activation
    across the leaky kink is shrunk tenfold (down to 1e-9) for that
    coordinate only, since the quotient would otherwise straddle two
    linear pieces. Parameters a stage's loss does not depend on (decoder
    under estimation, estimator under reconstruction) have an identically
    zero numerical derivative and are compared as such.
    """
    X = _as_array(inputs)
    _check_shape(model, X)
    Y = np.broadcast_to(
        np.asarray(target, dtype=np.float64).reshape(X.shape[0], -1),
        (X.shape[0], model.arch.estimator_outputs),
    )
    ld = np.longdouble
    Xl, Yl = X.astype(ld), Y.astype(ld)
    base = {k: v.astype(ld)[None] for k, v in model.params.items()}
    piecewise = model.arch.leaky_slope != 1.0
    worst = 0.0
    for stage in (RECON, ESTIM):
        _, grads = stage_loss_and_grads(model, X, Y, stage)
        for name in _param_shapes(model.arch):
            if name not in STAGE_PARAMS[stage]:
                worst = max(worst, float(np.max(np.abs(grads.get(name, 0.0)), initial=0.0)) / 1e-8)
                continue
            g_a = grads[name].ravel()
            size = g_a.size
            g_n = np.zeros(size)
            steps = np.full(size, ld(h))
            pending = np.arange(size)
            while pending.size:
                k = pending.size
                pert = np.repeat(base[name].reshape(1, -1), 2 * k, axis=0)
                pert[np.arange(k), pending] += steps[pending]
                pert[k + np.arange(k), pending] -= steps[pending]
                P = dict(base, **{name: pert.reshape((2 * k,) + base[name].shape[1:])})
                loss, signs = _fd_losses(P, Xl, Yl, stage, model.arch)
                same = np.all(signs[:k] == signs[k:], axis=1)
                done = same | (steps[pending] < 1e-9) | (not piecewise)
                idx = pending[done]
                g_n[idx] = ((loss[:k] - loss[k:])[done] / (2 * steps[idx])).astype(np.float64)
                steps[pending[~done]] /= 10
                pending = pending[~done]
            den = np.maximum(np.maximum(np.abs(g_a), np.abs(g_n)), 1e-8)
            worst = max(worst, float(np.max(np.abs(g_a - g_n) / den, initial=0.0)))
    return worst


# -- imputation ----------------------------------------------------------------


def ldf_inputs(dataset: Dataset, clouds: CloudSet, pool: Dataset, with_labels: bool = True) -> LdfBatch:
    """Assemble one input per row of ``dataset`` against ``pool``."""
    if len(clouds) != len(dataset):
        raise DataError(f"{len(clouds)} clouds for {len(dataset)} samples")
    return assemble_batch(
        dataset.samples,
        dataset.labels if with_labels else None,
        clouds,
        pool.samples,
        pool.labels,
        objective_aux=dataset.aux_labels if with_labels else None,
    )


def impute_ldf(
    model: AutoencoderModel,
    dataset: Dataset,
    clouds: CloudSet,
    pool: Dataset,
    name: str = "ldf",
) -> Dataset:
    """``dataset`` with the encoded latent appended as a new last column."""
    batch = ldf_inputs(dataset, clouds, pool, with_labels=False)
    return dataset.append_feature(encode_batch(model, batch), name)


# -- persistence ---------------------------------------------------------------


def save_model(model: AutoencoderModel, path, extra: Optional[dict] = None) -> None:
    blob = {
        "format": "spatial_ldf.autoencoder",
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "params": model.flat().tolist(),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(blob))


def load_model(path):
    """Returns (model, extra) from :func:`save_model` output."""
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != "spatial_ldf.autoencoder":
        raise DataError(f"{path}: not an autoencoder checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    arch = ArchConfig(**blob["arch"])
    return AutoencoderModel.from_flat(arch, blob["params"]), blob.get("extra", {})


# -- FNN transfer baseline ---------------------------------------------------------

FNN_WIDTH = 128


@dataclass
class FnnModel:
    """Three ReLU layers of 128 units and a linear output unit.

    Targets are standardised internally; ``y_mean``/``y_std`` undo it.
    """

    params: dict
    y_mean: float = 0.0
    y_std: float = 1.0

    def copy(self) -> "FnnModel":
        return FnnModel({k: v.copy() for k, v in self.params.items()}, self.y_mean, self.y_std)


def init_fnn(n_features: int, seed: int) -> FnnModel:
    rng = np.random.default_rng(seed)
    sizes = [n_features, FNN_WIDTH, FNN_WIDTH, FNN_WIDTH, 1]
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = math.sqrt(6.0 / (a + b))
        params[f"w{i}"] = rng.uniform(-lim, lim, size=(a, b))
        params[f"b{i}"] = np.zeros(b)
    return FnnModel(params)


def _fnn_forward(P, X):
    hs, pre = [X], []
    h = X
    for i in range(3):
        a = h @ P[f"w{i}"] + P[f"b{i}"]
        pre.append(a)
        h = np.maximum(a, 0.0)
        hs.append(h)
    return (h @ P["w3"] + P["b3"])[:, 0], hs, pre


def _fnn_grads(P, hs, pre, d_out):
    grads = {}
    g = d_out[:, None]
    grads["w3"] = hs[3].T @ g
    grads["b3"] = g.sum(0)
    g = g @ P["w3"].T
    for i in (2, 1, 0):
        g = g * (pre[i] > 0)
        grads[f"w{i}"] = hs[i].T @ g
        grads[f"b{i}"] = g.sum(0)
        g = g @ P[f"w{i}"].T
    return grads


def predict_fnn(model: FnnModel, X) -> np.ndarray:
    out, _, _ = _fnn_forward(model.params, np.asarray(X, dtype=np.float64))
    return out * model.y_std + model.y_mean


def train_fnn(X, y, weights=None, cfg: TrainConfig = TrainConfig(epochs=200)) -> FnnModel:
    """Weighted-MSE training with Adam and seeded minibatches.

    The per-batch loss is ``sum(w_i * e_i**2) / batch_size`` so all-zero
    weights leave the parameters untouched.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise DataError("no training data")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("weights must be finite, nonnegative and one per sample")
    model = init_fnn(X.shape[1], cfg.seed)
    if w.sum() > 0:
        model.y_mean = float(np.average(y, weights=w))
        model.y_std = float(np.sqrt(np.average((y - model.y_mean) ** 2, weights=w))) or 1.0
    yz = (y - model.y_mean) / model.y_std
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    initial = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out, hs, pre = _fnn_forward(model.params, X[idx])
            e = out - yz[idx]
            loss = float(np.sum(w[idx] * e**2) / idx.size)
            if initial is None:
                initial = loss
            _divergence_check(loss, initial, f"fnn epoch {epoch}")
            d_out = 2.0 * w[idx] * e / idx.size
            opt.step(model.params, _fnn_grads(model.params, hs, pre, d_out))
    return model


def fnn_to_dict(model: FnnModel) -> dict:
    return {
        "format": "spatial_ldf.fnn",
        "version": CHECKPOINT_VERSION,
        "y_mean": model.y_mean,
        "y_std": model.y_std,
        "params": {k: v.tolist() for k, v in model.params.items()},
    }


def fnn_from_dict(blob: dict) -> FnnModel:
    if blob.get("format") != "spatial_ldf.fnn":
        raise DataError("not an FNN dump")
    return FnnModel(
        {k: np.asarray(v, dtype=np.float64) for k, v in blob["params"].items()},
        float(blob["y_mean"]),
        float(blob["y_std"]),
    )
