"""Pipeline configuration: full-scale and desk-scale presets, file parsing.

Config files are flat ``key = value`` text: ints, floats, booleans
(true/false), and comma-separated number lists. Unknown keys are
rejected with the offending line number so typos never silently fall
back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


@dataclass
class PipelineConfig:
    # point branch
    input_points: int = 16384
    input_feature_width: int = 1  # intensity channel
    level_points: list = field(default_factory=lambda: [4096, 1024, 256, 64])
    level_channels: list = field(default_factory=lambda: [96, 256, 512, 1024])
    level_radii: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0])
    group_size: int = 32
    bt_hidden: int = 512  # hidden width of the attention-weight MLP
    fp_channels: list = field(default_factory=lambda: [256, 256, 128, 128])

    # image branch
    image_width: int = 1280
    image_height: int = 384
    it_channels: list = field(default_factory=lambda: [64, 128, 256, 512])
    patch_sizes: list = field(default_factory=lambda: [32, 16, 8, 4])
    heads: int = 4
    embed_dim: int = 1024
    up_channels: int = 64
    fused_channels: int = 64

    # cross-modal interaction
    cmt_levels: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    cmt_scale_by_sqrt_d: bool = False

    # augmentation / contrastive
    tau: float = 0.07
    momentum: float = 0.999
    bank_capacity: int = 1024
    score_threshold: float = 0.3
    max_paste: int = 10
    denominator_includes_positive: bool = False
    contrast_dim: int = 64  # shared point/image projection width

    # detection losses
    bin_extent: float = 1.5
    bin_count: int = 6
    theta_bins: int = 12
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_contrast: float = 0.15
    proposal_points: int = 512
    nms_threshold: float = 0.3

    # scene crop
    crop_x: list = field(default_factory=lambda: [0.0, 70.4])
    crop_y: list = field(default_factory=lambda: [-40.0, 40.0])
    crop_z: list = field(default_factory=lambda: [-3.0, 1.0])

    def __post_init__(self):
        if len(self.level_points) != 4:
            raise ValueError("exactly 4 point levels required")
        if any(a <= b for a, b in zip(self.level_points, self.level_points[1:])):
            raise ValueError("level point counts must be strictly decreasing")
        if any(a >= b for a, b in zip(self.level_radii, self.level_radii[1:])):
            raise ValueError("level radii must be strictly increasing")
        if len(self.level_channels) != 4 or len(self.level_radii) != 4:
            raise ValueError("channels and radii must list 4 levels")
        if len(self.it_channels) != 4 or len(self.patch_sizes) != 4:
            raise ValueError("image branch must list 4 levels")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        w, h = self.image_width, self.image_height
        token_counts = []
        for lvl, s in enumerate(self.patch_sizes, start=1):
            w, h = w // 2, h // 2
            if (w % s) or (h % s):
                raise ValueError(f"patch size {s} does not divide level-{lvl} map {w}x{h}")
            token_counts.append((w // s) * (h // s))
        if len(set(token_counts)) != 1:
            raise ValueError(f"token count differs across levels: {token_counts}")
        self.tokens = token_counts[0]

    @property
    def up_strides(self) -> list:
        return [2 ** (i + 1) for i in range(4)]

    def map_size(self, level: int) -> tuple:
        """(width, height) of the image branch's level map, 1-based level."""
        return self.image_width >> level, self.image_height >> level


def full_config() -> PipelineConfig:
    return PipelineConfig()


def scaled_config() -> PipelineConfig:
    """Desk-scale preset: same topology, small enough for CI."""
    return PipelineConfig(
        input_points=256,
        level_points=[64, 16, 8, 4],
        level_channels=[16, 24, 32, 48],
        level_radii=[2.0, 4.0, 8.0, 16.0],
        group_size=8,
        bt_hidden=32,
        fp_channels=[32, 32, 24, 24],
        image_width=128,
        image_height=64,
        it_channels=[8, 16, 24, 32],
        patch_sizes=[8, 4, 2, 1],
        embed_dim=32,
        up_channels=8,
        fused_channels=8,
        bank_capacity=64,
        contrast_dim=16,
    )


_PRESETS = {"full": full_config, "scaled": scaled_config}

_INT_LISTS = {"level_points", "level_channels", "it_channels", "patch_sizes", "cmt_levels", "fp_channels"}


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected true/false, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is list:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if name in _INT_LISTS:
            return [int(s) for s in items]
        return [float(s) for s in items]
    raise ValueError(f"{name}: unsupported field kind {kind}")


def load_config(source: str) -> PipelineConfig:
    """Build a config from a preset name or a key=value file path."""
    if source in _PRESETS:
        return _PRESETS[source]()
    defaults = full_config()
    kinds = {f.name: type(getattr(defaults, f.name)) for f in fields(defaults)}
    overrides = {}
    with open(source, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValueError(f"{source}:{lineno}: expected key = value")
            key, _, raw = body.partition("=")
            key = key.strip()
            if key == "base":
                preset = raw.strip()
                if preset not in _PRESETS:
                    raise ValueError(f"{source}:{lineno}: unknown preset {preset!r}")
                defaults = _PRESETS[preset]()
                continue
            if key not in kinds:
                raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                overrides[key] = _parse_value(key, raw, kinds[key])
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
    return replace(defaults, **overrides)
