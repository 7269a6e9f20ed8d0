"""The staged classifier with optional MSD / SCFA / DDS plug-ins."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, apply_primitive
from .config import TrainConfig
from .dds import DDS
from .msd import MSD, MaskVector
from .nn import Linear, Module
from .rng import Rng
from .scfa import SCFA
from .ssm import SsmBlock, StageConfig
from .tokenizer import Tokenizer


@dataclass
class ForwardResult:
    logits: Tensor
    pooled: Tensor
    mask: MaskVector | None
    trace: dict = field(default_factory=dict)


class PointSsmClassifier(Module):
    def __init__(self, cfg: TrainConfig, num_classes: int, rng: Rng):
        cfg.validate()
        stages, width = cfg.stage_dims()
        self.cfg = cfg
        self.stage_cfg = StageConfig(stages, cfg.blocks_per_stage, width, cfg.state_size)
        self.tokenizer = Tokenizer(cfg.groups, cfg.neighbors, width, rng.substream(1), cfg.serialization)
        srng = rng.substream(2)
        self.ssm = [
            StageBlocks([SsmBlock(width, cfg.state_size, srng) for _ in range(cfg.blocks_per_stage)])
            for _ in range(stages)
        ]
        self.msd = MSD(width, rng.substream(3), cfg.msd) if cfg.msd != "off" else None
        self.scfa = (
            SCFA(width, cfg.groups, rng.substream(4), cfg.conv_kernel, cfg.aggregation, cfg.global_prompt)
            if cfg.aggregation != "off"
            else None
        )
        self.dds = (
            DDS(width, cfg.state_size, rng.substream(5), cfg.scan, cfg.dds_composed) if cfg.scan != "off" else None
        )
        self.head = Linear(width, num_classes, rng.substream(6))

    @property
    def needs_partner(self) -> bool:
        return self.scfa is not None or (self.msd is not None and self.msd.strategy == "similarity")

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            # ssm.0.blocks.0.x -> ssm.stage1.block0.x
            if name.startswith("ssm."):
                _, i, _, j, rest = name.split(".", 4)
                name = f"ssm.stage{int(i) + 1}.block{j}.{rest}"
            yield name, p

    def forward(
        self,
        points: np.ndarray,
        *,
        train: bool,
        rng: Rng | None = None,
        partner_points: np.ndarray | None = None,
        tau: float = 1.0,
        starts=0,
    ) -> ForwardResult:
        """Logits for a (B,N,3) batch.

        In training, ``partner_points`` holds the same-class cross-domain cloud
        of every sample; in inference each sample is its own partner.
        """
        nb = points.shape[0]
        cfg = self.cfg
        paired = train and self.needs_partner
        if paired and (partner_points is None or partner_points.shape != points.shape):
            raise ValueError("training with cross-domain modules needs partner clouds of the same shape")
        pts = np.concatenate([points, partner_points]) if paired else points
        if paired and np.ndim(starts):
            starts = np.concatenate([starts, starts])
        x = self.tokenizer(pts, starts).features
        trace = {
            "train": train,
            "pairing": "partner" if paired else "self",
            "partner_rows": (np.arange(nb) + nb) if paired else np.arange(nb),
            "msd_noise": False,
        }
        mask = None
        n_blocks = 1
        L = cfg.groups
        for pos, stage in enumerate(self.ssm, start=1):
            x = stage(x)
            if self.msd is not None and cfg.msd_position == pos:
                reference = None
                if self.msd.strategy == "similarity" and paired:
                    # each row is scored against the other half of the batch
                    reference = np.concatenate([x.data[nb:], x.data[:nb]])
                x, mask = self.msd(x, train=train, tau=tau, rng=rng, reference=reference)
                trace["msd_noise"] = bool(mask is not None and mask.g is not None)
            if self.scfa is not None and cfg.scfa_position == pos:
                if paired:
                    f1 = apply_primitive("slice", x, start=0, stop=nb, axis=0)
                    f2 = apply_primitive("slice", x, start=nb, stop=2 * nb, axis=0)
                else:
                    f1 = f2 = x
                x = self.scfa(f1, f2)
                n_blocks = self.scfa.n_blocks
                if self.dds is not None:
                    x = self.dds(x, n_blocks, rng)
                paired = False
        if paired:
            # partners were only needed for similarity masking
            x = apply_primitive("slice", x, start=0, stop=nb, axis=0)
        if mask is not None and mask.m.shape[0] != nb:
            mask = MaskVector(apply_primitive("slice", mask.m, start=0, stop=nb, axis=0), None, None, mask.tau)
        if cfg.pool == "f1" and n_blocks > 1:
            x = apply_primitive("slice", x, start=0, stop=L, axis=1)
        pooled = apply_primitive("mean", x, axis=1)
        return ForwardResult(self.head(pooled), pooled, mask, trace)


class StageBlocks(Module):
    def __init__(self, blocks: list[SsmBlock]):
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


def build_model(cfg: TrainConfig, num_classes: int, seed: int | None = None) -> PointSsmClassifier:
    return PointSsmClassifier(cfg, num_classes, Rng(cfg.seed if seed is None else seed, 0xA11))
