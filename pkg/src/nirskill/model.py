"""Encoder-decoder assembly, classifier head, parameter accounting and
weight-file serialization.

The encoder runs three causal conv blocks (kernels 11/3/3, SeLU, one
squeeze-excitation gate each); masked global average pooling over the
24-filter bottleneck yields the context vector. The decoder mirrors with
three transposed convs (kernels 3/3/11, SeLU) and channel dropout on the
two intermediate feature maps. Feature maps are re-masked after every
layer so end-padding can never influence valid positions, in either
direction of the network.

Weight file layout (little-endian): 4 magic bytes, u32 format version,
32-byte sha256 digest of the canonical config JSON, then per parameter:
u32 name length, UTF-8 name, u32 rank, u32 dims, float32 row-major payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import (
    Tensor,
    channel_dropout,
    conv1d_causal,
    conv_transpose1d,
    dense,
    dropout,
    global_avg_pool_masked,
    relu,
    se_block,
    selu,
    softmax,
)

__all__ = [
    "ModelConfig",
    "EncoderDecoderModel",
    "ClassifierModel",
    "build_model",
    "build_classifier",
    "encoder_features",
    "encode",
    "reconstruct",
    "head_probs",
    "classify",
    "count_params",
    "save_weights",
    "load_weights",
    "save_model",
    "load_model",
    "save_classifier",
    "load_classifier",
    "freeze_encoder",
    "config_digest",
    "WeightFormatError",
]

_MAGIC = b"NSKW"
_VERSION = 1

CONTEXT_DIM = 24


@dataclass(frozen=True)
class ModelConfig:
    n_ch: int
    mode: str = "end_to_end"  # or "baseline": identical wiring, different inputs
    encoder_filters: tuple[int, int, int] = (12, 16, 24)
    encoder_kernels: tuple[int, int, int] = (11, 3, 3)
    decoder_kernels: tuple[int, int, int] = (3, 3, 11)
    se_ratio: int = 4
    se_activation: str = "relu"
    se_placement: str = "all"  # or "bottleneck"
    decoder_channel_dropout: float = 1.0 / 6.0
    classifier_hidden: int = 120
    classifier_dropout: float = 0.5
    classifier_l1: float = 1e-4
    classifier_l2: float = 1e-4
    n_classes: int = 2

    def __post_init__(self):
        if self.n_ch < 1:
            raise ValueError("n_ch must be >= 1")
        if self.mode not in ("end_to_end", "baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.encoder_filters) != 3 or self.encoder_filters[2] != CONTEXT_DIM:
            raise ValueError(f"bottleneck width is fixed at {CONTEXT_DIM}")
        if tuple(self.encoder_kernels) != (11, 3, 3) or tuple(self.decoder_kernels) != (3, 3, 11):
            raise ValueError("kernel sizes are fixed at 11/3/3 and 3/3/11")
        if self.se_placement not in ("all", "bottleneck"):
            raise ValueError("se_placement must be 'all' or 'bottleneck'")
        if self.se_activation not in ("relu", "gelu"):
            raise ValueError("se_activation must be 'relu' or 'gelu'")
        for f in self.encoder_filters:
            if self._se_here(f) and f % self.se_ratio:
                raise ValueError(f"se_ratio {self.se_ratio} must divide gated width {f}")
        if not 0.0 <= self.decoder_channel_dropout < 1.0:
            raise ValueError("decoder_channel_dropout must be in [0, 1)")
        if not 0.0 <= self.classifier_dropout < 1.0:
            raise ValueError("classifier_dropout must be in [0, 1)")
        if self.n_classes != 2:
            raise ValueError("binary classification only")

    def _se_here(self, width: int) -> bool:
        return self.se_placement == "all" or width == self.encoder_filters[2]

    @property
    def in_channels(self) -> int:
        return 2 * self.n_ch


def config_digest(cfg: ModelConfig) -> bytes:
    doc = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).digest()


@dataclass
class EncoderDecoderModel:
    config: ModelConfig
    params: dict[str, Tensor]

    def encoder_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("enc", "se"))]


@dataclass
class ClassifierModel:
    """Frozen-encoder reference plus the trainable 1-hidden-layer head."""

    config: ModelConfig
    encoder: EncoderDecoderModel
    params: dict[str, Tensor]


def _lecun_normal(rng, shape, fan_in) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)


def _glorot_uniform(rng, shape, fan_in, fan_out) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(rng)))


def build_model(cfg: ModelConfig, rng) -> EncoderDecoderModel:
    """Wire and initialize all layers; deterministic for a given rng/seed."""
    rng = _as_generator(rng)
    f1, f2, fb = cfg.encoder_filters
    k1, k2, k3 = cfg.encoder_kernels
    d1, d2, d3 = cfg.decoder_kernels
    cin = cfg.in_channels
    params: dict[str, Tensor] = {}

    def param(name, value):
        params[name] = Tensor(value, requires_grad=True)

    def se_params(name, width):
        hidden = width // cfg.se_ratio
        param(f"{name}.w1", _glorot_uniform(rng, (width, hidden), width, hidden))
        param(f"{name}.b1", np.zeros(hidden))
        param(f"{name}.w2", _glorot_uniform(rng, (hidden, width), hidden, width))
        param(f"{name}.b2", np.zeros(width))

    # encoder convs use SeLU, hence LeCun-normal init
    for name, k, a, b in (("enc1", k1, cin, f1), ("enc2", k2, f1, f2), ("enc3", k3, f2, fb)):
        param(f"{name}.w", _lecun_normal(rng, (k, a, b), k * a))
        param(f"{name}.b", np.zeros(b))
        if cfg._se_here(b):
            se_params(f"se{name[-1]}", b)

    # decoder transposed convs: weights shaped like the mirrored forward conv,
    # (k, out_channels, in_channels); fan-in is k * actual input channels
    for name, k, out_c, in_c in (
        ("dec1", d1, f2, fb),
        ("dec2", d2, f1, f2),
        ("dec3", d3, cin, f1),
    ):
        param(f"{name}.w", _lecun_normal(rng, (k, out_c, in_c), k * in_c))
        param(f"{name}.b", np.zeros(out_c))

    return EncoderDecoderModel(config=cfg, params=params)


def build_classifier(cfg: ModelConfig, encoder: EncoderDecoderModel, rng) -> ClassifierModel:
    rng = _as_generator(rng)
    hid, ncls = cfg.classifier_hidden, cfg.n_classes
    params = {
        "cls.w1": Tensor(
            _glorot_uniform(rng, (CONTEXT_DIM, hid), CONTEXT_DIM, hid), requires_grad=True
        ),
        "cls.b1": Tensor(np.zeros(hid), requires_grad=True),
        "cls.w2": Tensor(_glorot_uniform(rng, (hid, ncls), hid, ncls), requires_grad=True),
        "cls.b2": Tensor(np.zeros(ncls), requires_grad=True),
    }
    return ClassifierModel(config=cfg, encoder=freeze_encoder(encoder), params=params)


def _constant_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(p.data) for k, p in params.items()}


def freeze_encoder(model: EncoderDecoderModel) -> EncoderDecoderModel:
    """View of the model whose parameters take no part in gradient updates.

    The underlying arrays are shared; only the gradient requirement is
    dropped, so no graph is built through the encoder.
    """
    return EncoderDecoderModel(config=model.config, params=_constant_params(model.params))


def _mask3(mask: np.ndarray) -> Tensor:
    return Tensor(np.asarray(mask, dtype=np.float64)[:, :, None])


def encoder_features(
    model: EncoderDecoderModel, x, mask: np.ndarray, params: dict[str, Tensor] | None = None
) -> Tensor:
    """Bottleneck feature map (batch, time, 24), zeroed at padded steps."""
    cfg = model.config
    p = params if params is not None else model.params
    m3 = _mask3(mask)
    h = x if isinstance(x, Tensor) else Tensor(x)
    for i, width in enumerate(cfg.encoder_filters, start=1):
        h = selu(conv1d_causal(h, p[f"enc{i}.w"], p[f"enc{i}.b"]))
        if cfg._se_here(width):
            h = se_block(
                h, mask,
                p[f"se{i}.w1"], p[f"se{i}.b1"], p[f"se{i}.w2"], p[f"se{i}.b2"],
                act=cfg.se_activation,
            )
        h = h * m3
    return h


def encode(model: EncoderDecoderModel, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Context vectors (batch, 24): encoder forward + masked pooling, no graph."""
    consts = _constant_params(model.params)
    feats = encoder_features(model, np.asarray(x, dtype=np.float64), mask, params=consts)
    return global_avg_pool_masked(feats, mask).data


def reconstruct(
    model: EncoderDecoderModel,
    x,
    mask: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Full autoencoder forward (batch, time, 2*n_ch)."""
    cfg = model.config
    if training and cfg.decoder_channel_dropout > 0 and rng is None:
        raise ValueError("training-mode reconstruct needs an rng for channel dropout")
    p = model.params if training else _constant_params(model.params)
    m3 = _mask3(mask)
    h = encoder_features(model, x, mask, params=p)
    for i in (1, 2, 3):
        h = selu(conv_transpose1d(h, p[f"dec{i}.w"], p[f"dec{i}.b"]))
        if i < 3:
            h = channel_dropout(h, cfg.decoder_channel_dropout, rng, training)
        h = h * m3
    return h


def head_probs(
    clf: ClassifierModel,
    contexts,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Softmax class probabilities from context vectors."""
    p = clf.params if training else _constant_params(clf.params)
    h = relu(dense(contexts if isinstance(contexts, Tensor) else Tensor(contexts),
                   p["cls.w1"], p["cls.b1"]))
    h = dropout(h, clf.config.classifier_dropout, rng, training)
    return softmax(dense(h, p["cls.w2"], p["cls.b2"]))


def classify(clf: ClassifierModel, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(p_negative, p_positive) per example; positive iff p_positive >= 0.5."""
    contexts = encode(clf.encoder, x, mask)
    return head_probs(clf, contexts).data


def count_params(model: EncoderDecoderModel | ClassifierModel) -> int:
    return int(sum(p.data.size for p in model.params.values()))


class WeightFormatError(ValueError):
    pass


def save_weights(params: dict[str, Tensor], digest: bytes, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(digest)
        for name, p in params.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            shape = p.data.shape
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_weights(path: str | Path, expected_digest: bytes) -> dict[str, np.ndarray]:
    """Read a weight file, verifying magic/version/digest and completeness."""
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise WeightFormatError(f"{path}: truncated weight file")
        out = blob[off : off + n]
        off += n
        return out

    if take(4) != _MAGIC:
        raise WeightFormatError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    digest = take(32)
    if digest != expected_digest:
        raise WeightFormatError(f"{path}: weight file was saved under a different config")
    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        if name_len == 0 or name_len > 1024:
            raise WeightFormatError(f"{path}: implausible entry name length {name_len}")
        try:
            name = take(name_len).decode()
        except UnicodeDecodeError:
            raise WeightFormatError(f"{path}: corrupt entry name") from None
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise WeightFormatError(f"{path}: implausible tensor rank {rank}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if shape else 1
        payload = take(4 * count)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return out


def _install(model_params: dict[str, Tensor], loaded: dict[str, np.ndarray], path) -> None:
    if set(loaded) != set(model_params):
        raise WeightFormatError(f"{path}: parameter names do not match the config")
    for name, arr in loaded.items():
        if arr.shape != model_params[name].data.shape:
            raise WeightFormatError(
                f"{path}: shape mismatch for {name}: file {arr.shape}, "
                f"config {model_params[name].data.shape}"
            )
        model_params[name].data = arr


def save_model(model: EncoderDecoderModel, path: str | Path) -> None:
    save_weights(model.params, config_digest(model.config), path)


def load_model(path: str | Path, cfg: ModelConfig) -> EncoderDecoderModel:
    model = build_model(cfg, rng=0)
    _install(model.params, load_weights(path, config_digest(cfg)), path)
    return model


def save_classifier(clf: ClassifierModel, path: str | Path) -> None:
    save_weights(clf.params, config_digest(clf.config), path)


def load_classifier(path: str | Path, cfg: ModelConfig, encoder: EncoderDecoderModel) -> ClassifierModel:
    clf = build_classifier(cfg, encoder, rng=0)
    _install(clf.params, load_weights(path, config_digest(cfg)), path)
    return clf
