"""Detection network: small conv backbone, shared 3x3 conv, and three 1x1 heads.

Data flow for one image ``[3, H0, W0]``::

    backbone (conv3x3 + relu + maxpool2) x len(backbone_channels)
      -> conv1 3x3 + relu                        shared features [c2, H, W]
      -> conv2 1x1                                offsets     [4A, H, W]
      -> conv3 1x1                                embeddings  [A*d, H, W]
      -> conv4 1x1 on embeddings (or on shared) -> logistic scores [A, H, W]

Offset channels are grouped per anchor (``a*4 + j``), embedding channels
likewise (``a*d + k``).
"""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from srpn import tensor as T
from srpn.anchors import AnchorLabels, Label, LabeledAnchor

CHECKPOINT_MAGIC = b"SRPNCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HeadConfig:
    backbone_channels: tuple = (16, 32, 32)
    c2: int = 32
    num_anchor: int = 9
    dim_embedding: int = 20
    in_channels: int = 3
    classifier_input: str = "embedding"   # or "shared"
    head_init_std: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        if not self.backbone_channels:
            raise ValueError("backbone needs at least one stage")
        if self.classifier_input not in ("embedding", "shared"):
            raise ValueError(f"classifier_input must be 'embedding' or 'shared', got {self.classifier_input!r}")

    @property
    def c1(self):
        return self.backbone_channels[-1]

    @property
    def stride(self):
        return 2 ** len(self.backbone_channels)

    @property
    def c3(self):
        return 4 * self.num_anchor

    @property
    def c4(self):
        return self.num_anchor * self.dim_embedding

    @property
    def c5(self):
        return self.num_anchor

    def layer_shapes(self):
        """Ordered (name, weight shape) for every conv layer."""
        shapes = []
        cin = self.in_channels
        for i, c in enumerate(self.backbone_channels):
            shapes.append((f"backbone.{i}", (c, cin, 3, 3)))
            cin = c
        shapes.append(("conv1", (self.c2, self.c1, 3, 3)))
        shapes.append(("conv2", (self.c3, self.c2, 1, 1)))
        shapes.append(("conv3", (self.c4, self.c2, 1, 1)))
        cls_in = self.c4 if self.classifier_input == "embedding" else self.c2
        shapes.append(("conv4", (self.c5, cls_in, 1, 1)))
        return shapes

    def parameter_count(self):
        return sum(int(np.prod(s)) + s[0] for _, s in self.layer_shapes())


@dataclass
class Model:
    config: HeadConfig
    seed: int
    params: dict = field(default_factory=dict)   # name -> Tensor, insertion-ordered
    extra: dict = field(default_factory=dict)    # free-form metadata stored in checkpoints

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"state entry {k} {np.shape(v)} does not fit this model")
            self.params[k].data = np.array(v, dtype=np.float64)


@dataclass
class HeadOutput:
    offsets: T.Tensor
    embeddings: T.Tensor
    scores: T.Tensor

    @property
    def feature_shape(self):
        return self.scores.shape[1:]


def build(config, rng_seed):
    """Backbone layers get He-normal weights; head layers N(0, std^2). All biases 0."""
    rng = np.random.default_rng(rng_seed)
    model = Model(config, int(rng_seed))
    for name, shape in config.layer_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt(2.0 / fan_in) if name.startswith("backbone") else config.head_init_std
        model.params[f"{name}.weight"] = T.Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
        model.params[f"{name}.bias"] = T.Tensor(np.zeros(shape[0]), requires_grad=True)
    return model


def _conv(model, name, x, pad):
    return T.conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"], pad)


def forward(model, image):
    cfg = model.config
    image = image if isinstance(image, T.Tensor) else T.Tensor(image)
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ValueError(f"expected image [{cfg.in_channels}, H, W], got {image.shape}")
    h, w = image.shape[1:]
    if h % cfg.stride or w % cfg.stride:
        raise ValueError(f"image size {h}x{w} must be divisible by the network stride {cfg.stride}")
    x = image
    for i in range(len(cfg.backbone_channels)):
        x = T.maxpool2d(T.relu(_conv(model, f"backbone.{i}", x, 1)), 2)
    shared = T.relu(_conv(model, "conv1", x, 1))
    offsets = _conv(model, "conv2", shared, 0)
    emb = _conv(model, "conv3", shared, 0)
    cls_in = emb if cfg.classifier_input == "embedding" else shared
    scores = T.logistic(_conv(model, "conv4", cls_in, 0))
    return HeadOutput(offsets, emb, scores)


def predict(model, image):
    """Forward pass without recording; returns plain arrays."""
    with T.no_grad():
        out = forward(model, image)
    return out.offsets.data, out.embeddings.data, out.scores.data


@dataclass
class AnchorViews:
    offsets: T.Tensor      # [N, 4]
    embeddings: T.Tensor   # [N, d]
    scores: T.Tensor       # [N]
    index: np.ndarray      # anchor indices of the rows


def flatten_map(x, per_anchor):
    """[A*k, H, W] tensor -> [H*W*A, k] in anchor index order."""
    ak, h, w = x.shape
    a = ak // per_anchor
    t = T.reshape(x, (a, per_anchor, h, w))
    t = T.transpose(t, (2, 3, 0, 1))
    return T.reshape(t, (h * w * a, per_anchor))


def unflatten_map(flat, num_anchor, h, w):
    """Inverse of :func:`flatten_map` on plain arrays."""
    flat = np.asarray(flat)
    k = flat.shape[1]
    return flat.reshape(h, w, num_anchor, k).transpose(2, 3, 0, 1).reshape(num_anchor * k, h, w)


def _labels_of(labels):
    if isinstance(labels, AnchorLabels):
        return labels.labels
    if len(labels) and isinstance(labels[0], LabeledAnchor):
        return np.array([int(l.label) for l in labels])
    return np.asarray(labels)


def extract_anchor_views(out, labels, keep=None):
    """Per-anchor (offsets, embedding, score) rows, dropping ignore-labelled anchors.

    ``keep`` optionally restricts to a subset of anchor indices (kept in the
    given order); ignore-labelled entries in it are still dropped.
    """
    a = out.scores.shape[0]
    h, w = out.feature_shape
    lab = _labels_of(labels)
    if len(lab) != a * h * w:
        raise ValueError(f"{len(lab)} anchor labels for a head producing {a}x{h}x{w} = {a * h * w} anchors")
    idx = np.arange(len(lab)) if keep is None else np.asarray(keep, dtype=np.int64)
    idx = idx[lab[idx] != Label.IGNORE]
    d = out.embeddings.shape[0] // a
    return AnchorViews(
        T.take(flatten_map(out.offsets, 4), idx),
        T.take(flatten_map(out.embeddings, d), idx),
        T.reshape(T.take(flatten_map(out.scores, 1), idx), (len(idx),)),
        idx,
    )


def save_checkpoint(model, path, extra=None):
    """Binary container: magic, version, JSON header, then little-endian float64 blobs."""
    entries, blobs, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    cfg = asdict(model.config)
    cfg["backbone_channels"] = list(cfg["backbone_channels"])
    header = json.dumps({"config": cfg, "seed": model.seed, "tensors": entries,
                         "extra": extra or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    model = Model(HeadConfig(**header["config"]), header["seed"], extra=header["extra"])
    for e in header["tensors"]:
        start = base + e["offset"]
        data = np.frombuffer(blob[start:start + e["nbytes"]], dtype="<f8").reshape(e["shape"])
        model.params[e["name"]] = T.Tensor(data.astype(np.float64), requires_grad=True)
    expected = [f"{n}.{k}" for n, _ in model.config.layer_shapes() for k in ("weight", "bias")]
    if list(model.params) != expected:
        raise ValueError(f"{path}: parameter set does not match its config")
    return model
