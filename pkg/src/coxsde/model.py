"""The generative/inference model pair: prior drift net + posterior correction.

Bundles everything a posterior simulation needs (drift network, set encoder,
diffusion coefficient, initial state) so training, inference, and
checkpointing can pass a single object around.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import DeepSetsEncoder, DriftNet
from .sde import SdeSpec, Seed, make_diffusion


@dataclass
class IntensityModel:
    drift_net: DriftNet
    encoder: DeepSetsEncoder
    diffusion: object
    z0: float

    @classmethod
    def create(cls, z0: float = 5.0, diffusion_kind: str = "sqrt",
               diffusion_scale: float = 1.0, drift_hidden=(64, 64),
               pooled_dim: int = 32, psi_hidden=(64,), rho_hidden=(64,),
               seed: Seed = 0) -> "IntensityModel":
        return cls(
            drift_net=DriftNet(hidden=drift_hidden, seed=(seed, 10)),
            encoder=DeepSetsEncoder(pooled_dim=pooled_dim, psi_hidden=psi_hidden,
                                    rho_hidden=rho_hidden, seed=(seed, 11)),
            diffusion=make_diffusion(diffusion_kind, diffusion_scale),
            z0=z0,
        )

    def prior_spec(self) -> SdeSpec:
        """The learned prior as a plain drift/diffusion pair."""
        return SdeSpec(drift=self.drift_net.as_drift_fn(),
                       diffusion=lambda z, t: self.diffusion.value(z, t),
                       z0=self.z0)

    def correction_fn(self):
        return self.encoder.correction_fn(self.diffusion)

    def to_dict(self) -> dict:
        diff = {"kind": self.diffusion.kind}
        if diff["kind"] == "const":
            diff["scale"] = self.diffusion.scale
        return {
            "drift_net": {
                "sizes": self.drift_net.net.sizes,
                "params": self.drift_net.get_params().tolist(),
            },
            "encoder": {
                "psi_sizes": self.encoder.psi.sizes,
                "rho_sizes": self.encoder.rho.sizes,
                "params": self.encoder.get_params().tolist(),
            },
            "diffusion": diff,
            "z0": self.z0,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityModel":
        drift_sizes = d["drift_net"]["sizes"]
        enc = d["encoder"]
        model = cls.create(
            z0=float(d["z0"]),
            diffusion_kind=d["diffusion"]["kind"],
            diffusion_scale=float(d["diffusion"].get("scale", 1.0)),
            drift_hidden=tuple(drift_sizes[1:-1]),
            pooled_dim=int(enc["psi_sizes"][-1]),
            psi_hidden=tuple(enc["psi_sizes"][1:-1]),
            rho_hidden=tuple(enc["rho_sizes"][1:-1]),
        )
        model.drift_net.set_params(np.asarray(d["drift_net"]["params"], dtype=float))
        model.encoder.set_params(np.asarray(enc["params"], dtype=float))
        return model
