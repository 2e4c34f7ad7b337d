"""Flat TOML experiment configuration.

One file holds every knob of a run as top-level ``key = value`` lines. Unknown
keys and nested tables are rejected. :func:`dump` writes the fully resolved
config so each output directory records what produced it.
"""
import sys
from dataclasses import dataclass, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from srpn.anchors import AnchorSpec
from srpn.evaluator import EvalConfig
from srpn.head import HeadConfig
from srpn.losses import LossWeights
from srpn.synth import SceneSpec
from srpn.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # seeds
    seed: int = 0                   # parameter init
    data_seed: int = 0              # batch order, augmentation, pair/triplet draws
    dataset_seed: int = 1000        # synthetic images; eval and negative sets offset from it
    # synthetic data
    image_size: int = 64
    n_train: int = 200
    n_eval: int = 50
    n_negative: int = 50
    object_count_range: tuple = (2, 5)
    radius_range: tuple = (4.0, 8.0)
    ellipse_eccentricity_range: tuple = (0.0, 0.75)
    overlap_allowance: float = 0.05
    clutter_count_range: tuple = (2, 4)
    pixel_noise: float = 0.04
    # anchors and network
    anchor_scales: tuple = (8.0, 12.0, 16.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    backbone_channels: tuple = (16, 32, 32)
    c2: int = 32
    dim_embedding: int = 20
    classifier_input: str = "embedding"
    head_init_std: float = 0.01
    # training
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 4
    iterations: int = 2000
    embed_mode: str = "triplet"
    margin: float = 2.0
    weight_embed: float = 1.0
    weight_loc: float = 1.0
    weight_cls: float = 1.0
    ohem: bool = True
    neg_pos_ratio: float = 3.0
    max_sampled: int = 256
    cls_loss: str = "ce"
    pos_thresh: float = 0.7
    neg_thresh: float = 0.3
    best_per_gt: bool = True
    pairs_per_positive: int = 4
    max_pairs: int = 256
    augment: bool = True
    normalize: bool = True
    # evaluation
    score_threshold: float = 0.5
    nms_iou: float = 0.3
    match_iou: float = 0.3
    ap_score_floor: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(f.default, tuple):
                if not isinstance(v, (list, tuple)) or not all(_is_number(x) for x in v):
                    raise ConfigError(f"{f.name}: expected a list of numbers, got {v!r}")
                kind = type(f.default[0]) if f.default else float
                object.__setattr__(self, f.name, tuple(kind(x) for x in v))
            elif isinstance(f.default, bool):
                if not isinstance(v, bool):
                    raise ConfigError(f"{f.name}: expected true or false, got {v!r}")
            elif isinstance(f.default, int):
                if not (isinstance(v, int) and not isinstance(v, bool)):
                    raise ConfigError(f"{f.name}: expected an integer, got {v!r}")
            elif isinstance(f.default, float):
                if not _is_number(v):
                    raise ConfigError(f"{f.name}: expected a number, got {v!r}")
                object.__setattr__(self, f.name, float(v))
            elif isinstance(f.default, str) and not isinstance(v, str):
                raise ConfigError(f"{f.name}: expected a string, got {v!r}")
        # build every component once so invalid combinations fail at load time
        try:
            self.train_config()
            self.eval_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def scene_spec(self):
        return SceneSpec(image_size=self.image_size, object_count_range=self.object_count_range,
                         radius_range=self.radius_range,
                         ellipse_eccentricity_range=self.ellipse_eccentricity_range,
                         overlap_allowance=self.overlap_allowance, clutter_count_range=self.clutter_count_range,
                         pixel_noise=self.pixel_noise)

    def head_config(self):
        return HeadConfig(backbone_channels=self.backbone_channels, c2=self.c2,
                          num_anchor=len(self.anchor_scales) * len(self.anchor_ratios),
                          dim_embedding=self.dim_embedding, classifier_input=self.classifier_input,
                          head_init_std=self.head_init_std)

    def anchor_spec(self):
        return AnchorSpec(scales=self.anchor_scales, ratios=self.anchor_ratios,
                          stride=2 ** len(self.backbone_channels))

    def train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate, momentum=self.momentum, batch_size=self.batch_size,
            iterations=self.iterations, embed_mode=self.embed_mode, margin=self.margin,
            loss_weights=LossWeights(self.weight_embed, self.weight_loc, self.weight_cls),
            anchor_spec=self.anchor_spec(), head=self.head_config(), ohem=self.ohem,
            neg_pos_ratio=self.neg_pos_ratio, max_sampled=self.max_sampled, cls_loss=self.cls_loss,
            pos_thresh=self.pos_thresh, neg_thresh=self.neg_thresh, best_per_gt=self.best_per_gt,
            pairs_per_positive=self.pairs_per_positive, max_pairs=self.max_pairs, augment=self.augment,
            normalize=self.normalize, seed=self.seed, data_seed=self.data_seed)

    def eval_config(self):
        return EvalConfig(score_threshold=self.score_threshold, nms_iou=self.nms_iou, match_iou=self.match_iou,
                          ap_score_floor=self.ap_score_floor)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def from_dict(values, base=None):
    for k, v in values.items():
        if isinstance(v, dict):
            raise ConfigError(f"{k}: nested tables are not supported; use flat keys")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    return replace(base or ExperimentConfig(), **values)


def loads(text):
    try:
        values = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from None
    return from_dict(values)


def load(path):
    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"{path}: not UTF-8 text") from None
    try:
        return loads(text)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return "[" + ", ".join(_format(x) for x in v) + "]"


def dumps(cfg):
    return "".join(f"{k} = {_format(v)}\n" for k, v in cfg.as_dict().items())


def dump(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(cfg))
