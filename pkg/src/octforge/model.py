"""Two-stream detector: CDI backbone + SI backbone + attention fusion head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import FusionHead, FusionOutput
from .layers import Module
from .octnet import BackboneConfig, OctResNet, OctTensor
from .tensor import Parameter, Tensor


@dataclass
class ModelConfig:
    depth: str = "desk-10"
    alpha: float = 0.25
    seed: int = 0


class Detector(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.cdi = OctResNet(BackboneConfig(cfg.depth, cfg.alpha, in_channels=3), rng)
        self.si = OctResNet(BackboneConfig(cfg.depth, cfg.alpha, in_channels=1), rng)
        self.head = FusionHead(self.cdi.cfg.feature_dim, rng)
        self.named_parameters()  # assigns dotted names

    def __call__(self, cdi: Tensor, si: Tensor) -> FusionOutput:
        return self.head(self.cdi(cdi), self.si(si))

    def forward_prefix(self, cdi: Tensor, si: Tensor) -> tuple[OctTensor, OctTensor]:
        return self.cdi.forward_prefix(cdi), self.si.forward_prefix(si)

    def forward_suffix(self, z_cdi: OctTensor, z_si: OctTensor) -> FusionOutput:
        return self.head(self.cdi.forward_suffix(z_cdi), self.si.forward_suffix(z_si))

    def finetune_modules(self) -> list[Module]:
        """Modules left trainable in the fine-tuning stage."""
        return [self.cdi.final_block, self.si.final_block, self.head]

    def freeze_for_finetune(self) -> None:
        self.set_trainable(False)
        for m in self.finetune_modules():
            m.set_trainable(True)

    def set_finetune_mode(self) -> None:
        """Frozen layers run on running statistics; fine-tuned ones train."""
        self.eval()
        for m in self.finetune_modules():
            m.train(True)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and buffers keyed by name (views, not copies)."""
        out = {f"param/{k}": p.data for k, p in self.named_parameters().items()}
        out.update({f"buffer/{k}": b for k, b in self.named_buffers().items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}")
        for k, dst in own.items():
            src = arrays[k]
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {dst.shape}")
            dst[...] = src

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]
