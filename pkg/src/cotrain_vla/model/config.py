"""Model hyperparameters. Desk defaults train in minutes on one CPU core."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class ModelConfig:
    # VLM expert
    width: int = 64
    depth: int = 2
    mlp_dim: int = 256
    num_heads: int = 4
    head_dim: int = 16
    num_kv_heads: int = 4
    # action expert
    expert_width: int = 32
    expert_mlp_dim: int = 128
    vocab_size: int = 1024
    # observation layout
    image_size: int = 16
    patch: int = 4
    n_cam: int = 2
    max_prompt: int = 12
    proprio_dim: int = 7
    max_target: int = 64
    # actions and flow
    horizon: int = 8
    d_max: int = 7
    denoise_steps: int = 10
    s: float = 0.999
    beta_a: float = 1.5
    beta_b: float = 1.0
    time_min_period: float = 4e-3
    time_max_period: float = 4.0

    def validate(self) -> "ModelConfig":
        """Checked when a network is built; reference presets are only recorded."""
        if self.width % self.num_heads:
            raise ValueError("width must be divisible by num_heads")
        if self.num_heads % self.num_kv_heads:
            raise ValueError("num_heads must be a multiple of num_kv_heads")
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if self.horizon < 1 or self.denoise_steps < 1:
            raise ValueError("horizon and denoise_steps must be positive")
        return self

    @property
    def time_width(self) -> int:
        return self.expert_width

    @property
    def patches_per_cam(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def n_image_tokens(self) -> int:
        return self.n_cam * self.patches_per_cam

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def n_positions(self) -> int:
        return self.n_image_tokens + self.max_prompt + self.proprio_dim + self.max_target

    def block_offsets(self) -> dict[str, int]:
        o = {"image": 0, "prompt": self.n_image_tokens}
        o["proprio"] = o["prompt"] + self.max_prompt
        o["target"] = o["proprio"] + self.proprio_dim
        return o

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


DESK = ModelConfig()

# reference dimensions of the full-size model; recorded, never instantiated here
REFERENCE_SCALE = ModelConfig(
    width=2048, depth=18, mlp_dim=16384, num_heads=18, num_kv_heads=1, head_dim=256,
    expert_width=1024, expert_mlp_dim=4096, vocab_size=257152,
    image_size=224, patch=14, n_cam=4, max_prompt=200, max_target=256,
    horizon=50, d_max=32,
    s=0.999,
)

# float64 gradient-check configuration
TINY = ModelConfig(
    width=8, depth=1, mlp_dim=16, num_heads=2, head_dim=4, num_kv_heads=2, expert_width=8, expert_mlp_dim=16,
    vocab_size=24, image_size=4, patch=2, n_cam=1, max_prompt=4, proprio_dim=2, max_target=6,
    horizon=3, d_max=2,
)
