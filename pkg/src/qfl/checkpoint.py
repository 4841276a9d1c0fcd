"""Checkpoints: parameters, optimizer moments and run metadata in one container file."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .optim import OptimizerState


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_state: OptimizerState | None = None
    epoch: int = 0
    val_history: list[float] = field(default_factory=list)
    train_history: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        header = {
            "epoch": self.epoch,
            "val_history": self.val_history,
            "train_history": self.train_history,
            "config": self.config,
            "rng_state": self.rng_state,
            "opt_step": None,
        }
        if self.opt_state is not None:
            header["opt_step"] = self.opt_state.step
            arrays.update({f"opt_m/{k}": v for k, v in self.opt_state.m.items()})
            arrays.update({f"opt_v/{k}": v for k, v in self.opt_state.v.items()})
        container.write(path, arrays, header)

    @classmethod
    def load(cls, path) -> Checkpoint:
        header, arrays = container.read(path)

        def group(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        opt = None
        if header.get("opt_step") is not None:
            opt = OptimizerState(group("opt_m/"), group("opt_v/"), header["opt_step"])
        return cls(
            params=group("param/"),
            opt_state=opt,
            epoch=header["epoch"],
            val_history=header["val_history"],
            train_history=header["train_history"],
            config=header["config"],
            rng_state=header["rng_state"],
        )
