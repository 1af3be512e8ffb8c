"""Server configuration from environment variables and flags."""

import os
from dataclasses import dataclass
from typing import Mapping, Optional

DEFAULT_DETECTOR = "IDEA-Research/grounding-dino-tiny"
DEFAULT_SEGMENTER = "facebook/sam-vit-base"


@dataclass(frozen=True)
class SidecarConfig:
    detector: str = DEFAULT_DETECTOR
    segmenter: str = DEFAULT_SEGMENTER
    device: str = "cpu"
    host: str = "127.0.0.1"
    port: int = 8601

    @classmethod
    def from_env(cls, env: Optional[Mapping[str, str]] = None) -> "SidecarConfig":
        env = os.environ if env is None else env
        port_raw = env.get("SIDECAR_PORT")
        try:
            port = int(port_raw) if port_raw is not None else cls.port
        except ValueError as exc:
            raise ValueError(f"SIDECAR_PORT must be an integer, got {port_raw!r}") from exc
        return cls(
            detector=env.get("SIDECAR_DETECTOR", DEFAULT_DETECTOR),
            segmenter=env.get("SIDECAR_SEGMENTER", DEFAULT_SEGMENTER),
            device=env.get("SIDECAR_DEVICE", cls.device),
            host=env.get("SIDECAR_HOST", cls.host),
            port=port,
        )
