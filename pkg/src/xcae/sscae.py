"""Semi-supervised deep contractive autoencoder.

The loss for a mini-batch is

    mean_i ||x_i - xhat_i||^2                        (reconstruction)
  + mean_i lambda_c * ||dz_i/dx_i||_F^2              (contractive, full encoder Jacobian)
  + mean_i alpha_i * BCE(y_i, sigmoid(w_s . z_i + b_s))  (masked supervised term)

with ``alpha_i = lambda`` on labeled rows and 0 elsewhere.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from ._kernels_py import LINEAR, RELU, SIGMOID, mlp_forward
from .dataset import Dataset, MiniBatch, labeled_quota, sample_batch
from .numerics import AdamState, SeededRng, ShapeError, adam_step, derive_seed, sigmoid

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ACTIVATION_CODES = {"linear": LINEAR, "relu": RELU, "sigmoid": SIGMOID}


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Layout:
    """Layer widths ``dims[0] -> dims[1] -> ... -> dims[-1]``; the first
    ``n_enc`` layers form the encoder and ``dims[n_enc]`` is the latent size."""
    dims: tuple
    activations: tuple
    n_enc: int
    head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.activations) != len(self.dims) - 1:
            raise ValueError("need one activation per layer")
        bad = [a for a in self.activations if a not in ACTIVATION_CODES]
        if bad:
            raise ValueError(f"unknown activation(s): {bad}")
        if not 1 <= self.n_enc <= len(self.activations):
            raise ValueError("encoder must have at least one layer")
        if self.head and self.dims[-1] != self.dims[0]:
            raise ValueError("autoencoder output width must equal input width")

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def latent_dim(self) -> int:
        return self.dims[self.n_enc]

    @property
    def offsets(self) -> np.ndarray:
        offs, pos = [], 0
        for l in range(self.n_layers):
            offs.append(pos)
            pos += self.dims[l + 1] * (self.dims[l] + 1)
        offs.append(pos)
        return np.asarray(offs, dtype=np.int64)

    def layer_size(self, l: int) -> int:
        return self.dims[l + 1] * (self.dims[l] + 1)

    @property
    def n_params(self) -> int:
        return int(self.offsets[-1]) + (self.latent_dim + 1 if self.head else 0)

    @property
    def encoder_decoder_params(self) -> int:
        return int(self.offsets[-1])

    @property
    def act_codes(self) -> np.ndarray:
        return np.asarray([ACTIVATION_CODES[a] for a in self.activations], dtype=np.int32)

    @property
    def dims_array(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.int64)


def paper_layout(n: int = 20, hidden_layers: int = 2, width: int = 64, latent: int = 16,
                 output_activation: str = "sigmoid") -> Layout:
    """Encoder ``n -> width -> width/2 ... -> latent``; decoder ``latent -> latent -> ... -> n``.

    With the defaults this is 20-64-32-16 | 16-16-32-64-20, 8,180 weights and biases.
    """
    hidden = [max(1, width // (2 ** i)) for i in range(hidden_layers)]
    enc = [n] + hidden + [latent]
    dec = [latent] + hidden[::-1] + [n]
    dims = enc + dec
    acts = ["relu"] * (len(dims) - 2) + [output_activation]
    lay = Layout(tuple(dims), tuple(acts), n_enc=len(enc) - 1)
    if lay.latent_dim >= n:
        raise ValueError(f"latent size {latent} must be smaller than input size {n}")
    return lay


@dataclass
class LayerParams:
    W: np.ndarray
    b: np.ndarray
    activation: str


@dataclass
class ForwardTrace:
    pre: list          # a^(l), l = 1..L
    h: list            # h^(0..L)
    z: np.ndarray
    xhat: np.ndarray
    yhat: float


@dataclass
class TrainConfig:
    lambda_c: float = 1e-4
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 10_000
    seed: int = 0
    hidden_layers: int = 2
    width: int = 64
    latent: int = 16
    log_interval: int = 100

    def validate(self) -> list[str]:
        errs = []
        if self.lambda_c < 0:
            errs.append("lambda_c must be >= 0")
        if self.lam < 0:
            errs.append("lambda must be >= 0")
        if not self.lr > 0:
            errs.append("lr must be > 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.steps < 0:
            errs.append("steps must be >= 0")
        if self.hidden_layers < 1:
            errs.append("hidden_layers must be >= 1")
        if self.log_interval < 1:
            errs.append("log_interval must be >= 1")
        return errs

    @property
    def mode(self) -> str:
        return "vanilla-ae" if self.lambda_c == 0 and self.lam == 0 else "ss-deepcae"


class SSCaeModel:
    def __init__(self, layout: Layout, params: np.ndarray, meta: Optional[dict] = None):
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (layout.n_params,):
            raise ShapeError(f"expected {layout.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("model parameters must be finite")
        self.layout = layout
        self.params = params
        self.meta = dict(meta or {})

    # -- structure ---------------------------------------------------------
    @property
    def input_dim(self) -> int:
        return self.layout.input_dim

    @property
    def latent_dim(self) -> int:
        return self.layout.latent_dim

    def _layer(self, l: int) -> LayerParams:
        lay = self.layout
        o, i = lay.dims[l + 1], lay.dims[l]
        off = int(lay.offsets[l])
        return LayerParams(self.params[off:off + o * i].reshape(o, i),
                           self.params[off + o * i:off + o * i + o], lay.activations[l])

    @property
    def encoder_layers(self) -> list[LayerParams]:
        return [self._layer(l) for l in range(self.layout.n_enc)]

    @property
    def decoder_layers(self) -> list[LayerParams]:
        return [self._layer(l) for l in range(self.layout.n_enc, self.layout.n_layers)]

    @property
    def head(self) -> LayerParams:
        off = int(self.layout.offsets[-1])
        m = self.latent_dim
        return LayerParams(self.params[off:off + m].reshape(1, m),
                           self.params[off + m:off + m + 1], "sigmoid")

    def trainable_count(self) -> int:
        """Encoder + decoder weights and biases (head excluded)."""
        return self.layout.encoder_decoder_params

    def copy(self) -> "SSCaeModel":
        return SSCaeModel(self.layout, self.params.copy(), json.loads(json.dumps(self.meta)))

    # -- inference ---------------------------------------------------------
    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.input_dim:
            raise ShapeError(f"model expects {self.input_dim} features, got {X.shape[-1]}")
        return X

    def encode_decode(self, X: np.ndarray):
        """Batched pass: returns (z, xhat, yhat) for rows of ``X``."""
        X = np.atleast_2d(self._check(X))
        lay = self.layout
        hs = mlp_forward(self.params, lay.dims, lay.act_codes, lay.offsets, X)
        z = hs[lay.n_enc]
        head = self.head
        yhat = sigmoid(z @ head.W[0] + head.b[0])
        return z, hs[-1], np.atleast_1d(yhat)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.encode_decode(X)[2]

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        lay = self.layout
        layers = []
        for l in range(lay.n_layers):
            layers.append({"role": "encoder" if l < lay.n_enc else "decoder",
                           "in": lay.dims[l], "out": lay.dims[l + 1],
                           "activation": lay.activations[l]})
        if lay.head:
            layers.append({"role": "head", "in": lay.latent_dim, "out": 1, "activation": "sigmoid"})
        return {
            "format_version": FORMAT_VERSION,
            "kind": "ss-deepcae",
            "input_dim": lay.input_dim,
            "latent_dim": lay.latent_dim,
            "layers": layers,
            "params": [float(v) for v in self.params],
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "SSCaeModel":
        if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "ss-deepcae":
            raise ValueError("not a version-1 SS-DeepCAE model document")
        layers = [l for l in d["layers"] if l["role"] != "head"]
        dims = [layers[0]["in"]] + [l["out"] for l in layers]
        n_enc = sum(1 for l in layers if l["role"] == "encoder")
        layout = Layout(tuple(dims), tuple(l["activation"] for l in layers), n_enc,
                        head=any(l["role"] == "head" for l in d["layers"]))
        reserved = {"format_version", "kind", "input_dim", "latent_dim", "layers", "params"}
        meta = {k: v for k, v in d.items() if k not in reserved}
        return cls(layout, np.asarray(d["params"], dtype=np.float64), meta)

    @classmethod
    def load(cls, path) -> "SSCaeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_model(layout: Layout, rng: SeededRng) -> SSCaeModel:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    params = np.zeros(layout.n_params)
    offs = layout.offsets
    for l in range(layout.n_layers):
        i, o = layout.dims[l], layout.dims[l + 1]
        lim = math.sqrt(6.0 / (i + o))
        params[offs[l]:offs[l] + o * i] = rng.uniform(-lim, lim, o * i)
    if layout.head:
        m = layout.latent_dim
        lim = math.sqrt(6.0 / (m + 1))
        params[offs[-1]:offs[-1] + m] = rng.uniform(-lim, lim, m)
    return SSCaeModel(layout, params)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def forward(model: SSCaeModel, x) -> ForwardTrace:
    x = model._check(x)
    if x.ndim != 1:
        raise ShapeError("forward expects a single feature vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")
    pre, hs = [], [x]
    h = x
    for layer in model.encoder_layers + model.decoder_layers:
        a = layer.W @ h + layer.b
        pre.append(a)
        if layer.activation == "relu":
            h = np.maximum(a, 0.0)
        elif layer.activation == "sigmoid":
            h = 0.5 * (1.0 + np.tanh(0.5 * a))
        else:
            h = a
        hs.append(h)
    z = hs[model.layout.n_enc]
    head = model.head
    yhat = float(sigmoid(float(head.W[0] @ z + head.b[0])))
    return ForwardTrace(pre, hs, z, hs[-1], yhat)


def _act_prime(a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (a > 0).astype(np.float64)
    if activation == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * a))
        return s * (1.0 - s)
    return np.ones_like(a)


def encoder_jacobian(model: SSCaeModel, x) -> np.ndarray:
    """dz/dx (m x n) as the product of diag(f'(a_l)) W_l over encoder layers."""
    trace = forward(model, x)
    J = np.eye(model.input_dim)
    for l, layer in enumerate(model.encoder_layers):
        J = _act_prime(trace.pre[l], layer.activation)[:, None] * (layer.W @ J)
    return J


def _run_kernel(model: SSCaeModel, batch: MiniBatch, lambda_c: float, want_grad: bool,
                backend: Optional[str] = None):
    lay = model.layout
    if batch.X.shape[0] == 0:
        raise ValueError("empty batch")
    X = np.ascontiguousarray(model._check(batch.X))
    return kernels.get(backend).cae_loss_grad(
        model.params, lay.dims_array, lay.act_codes, lay.offsets, lay.n_enc, X,
        np.ascontiguousarray(batch.y, dtype=np.float64),
        np.ascontiguousarray(batch.alpha, dtype=np.float64), float(lambda_c), want_grad)


def loss_terms(model: SSCaeModel, batch: MiniBatch, lambda_c: float,
               backend: Optional[str] = None) -> dict:
    recon, contr, sup, _ = _run_kernel(model, batch, lambda_c, False, backend)
    return {"recon": recon, "contractive": contr, "supervised": sup,
            "total": recon + contr + sup}


def backward(model: SSCaeModel, batch: MiniBatch, lambda_c: float,
             backend: Optional[str] = None) -> dict:
    """Gradients of the total loss, split into encoder / decoder / head groups."""
    *_, grad = _run_kernel(model, batch, lambda_c, True, backend)
    lay = model.layout
    enc_end = int(lay.offsets[lay.n_enc])
    dec_end = int(lay.offsets[-1])
    return {"encoder": grad[:enc_end], "decoder": grad[enc_end:dec_end],
            "head": grad[dec_end:], "flat": grad}


def full_batch(dataset: Dataset, lam: float) -> MiniBatch:
    """Every row of ``dataset`` as one batch (labels visible on labeled rows only)."""
    rows = np.concatenate([dataset.labeled_idx, dataset.unlabeled_idx])
    y = np.zeros(len(rows))
    y[:dataset.n_labeled] = dataset.y[dataset.labeled_idx]
    alpha = np.zeros(len(rows))
    alpha[:dataset.n_labeled] = lam
    return MiniBatch(dataset.X[rows], y, alpha, rows, dataset.n_labeled)


@dataclass
class TrainHistory:
    steps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    recon: np.ndarray = field(default_factory=lambda: np.zeros(0))
    contractive: np.ndarray = field(default_factory=lambda: np.zeros(0))
    supervised: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_rows: list = field(default_factory=list)

    @property
    def total(self) -> np.ndarray:
        return self.recon + self.contractive + self.supervised


def _labeled_accuracy(model: SSCaeModel, data: Dataset) -> float:
    known = np.flatnonzero(~np.isnan(data.y))
    if known.size == 0:
        return float("nan")
    p = model.predict_proba(data.X[known])
    return float(np.mean((p > 0.5) == (data.y[known] > 0.5)))


def train(dataset: Dataset, cfg: TrainConfig, validation: Optional[Dataset] = None,
          layout: Optional[Layout] = None, backend: Optional[str] = None):
    """Adam on mixed labeled/unlabeled mini-batches. Returns (model, history)."""
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    layout = layout or paper_layout(dataset.n_features, cfg.hidden_layers, cfg.width, cfg.latent)
    model = init_model(layout, SeededRng(derive_seed(cfg.seed, "init")))
    model.meta["train_config"] = asdict(cfg)
    model.meta["seed"] = cfg.seed
    model.meta["mode"] = cfg.mode
    model.meta["feature_names"] = list(dataset.feature_names)
    if dataset.normalizer is not None:
        model.meta["normalizer"] = dataset.normalizer.to_dict()

    hist = TrainHistory()
    if cfg.steps == 0:
        return model, hist

    rng = SeededRng(derive_seed(cfg.seed, "batches"))
    b_l = labeled_quota(cfg.batch_size, dataset.n_labeled, len(dataset))
    b_u = cfg.batch_size - b_l
    state = AdamState(model.params.shape)
    terms = np.zeros((cfg.steps, 3))
    lay = model.layout
    kern = kernels.get(backend)
    dims, acts, offs = lay.dims_array, lay.act_codes, lay.offsets
    params = model.params
    val_batch = full_batch(validation, cfg.lam) if validation is not None and len(validation) else None
    for step in range(cfg.steps):
        batch = sample_batch(dataset, b_l, b_u, cfg.lam, rng)
        recon, contr, sup, grad = kern.cae_loss_grad(
            params, dims, acts, offs, lay.n_enc, np.ascontiguousarray(batch.X),
            batch.y, batch.alpha, float(cfg.lambda_c), True)
        total = recon + contr + sup
        if not math.isfinite(total) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss at step {step + 1}")
        terms[step] = (recon, contr, sup)
        params = adam_step(params, grad, state, cfg.lr)
        if (step + 1) % cfg.log_interval == 0 or step + 1 == cfg.steps:
            lo = max(0, step + 1 - cfg.log_interval)
            window = terms[lo:step + 1]
            row = {"step": step + 1, "recon": window[:, 0].mean(),
                   "contractive": window[:, 1].mean(), "supervised": window[:, 2].mean(),
                   "total": window.sum(axis=1).mean()}
            if val_batch is not None:
                model.params = params
                vt = loss_terms(model, val_batch, cfg.lambda_c, backend)
                row.update({f"val_{k}": v for k, v in vt.items()})
                row["val_accuracy"] = _labeled_accuracy(model, validation)
            hist.log_rows.append(row)
    model.params = params
    hist.steps = np.arange(1, cfg.steps + 1)
    hist.recon, hist.contractive, hist.supervised = terms[:, 0], terms[:, 1], terms[:, 2]
    return model, hist
