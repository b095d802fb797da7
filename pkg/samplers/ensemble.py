"""
Retained posterior samples and their checkpoint format.

    b"BDKE" | u32 count | count consecutive BDK1 parameter records
"""
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lab.exceptions import DataFormatError, PreconditionError
from networks.checkpoint import decode_params, encode_params
from networks.mlp import MlpSpec, ParamVector
from utils import atomic_write_bytes

MAGIC = b"BDKE"


@dataclass
class PosteriorEnsemble:
    samples: list
    spec: Optional[MlpSpec] = None
    provenance: dict = field(default_factory=dict)
    acceptance_rate: Optional[float] = None
    # final chain state, whether or not it was retained
    last: Optional[object] = None

    def __len__(self):
        return len(self.samples)

    def require_samples(self):
        if not self.samples:
            raise PreconditionError("Posterior ensemble holds no samples")
        return self.samples

    def stacked(self):
        """S x P matrix of sample values."""
        self.require_samples()
        return np.stack([getattr(sample, "values", sample) for sample in self.samples])

    @classmethod
    def merge(cls, ensembles):
        ensembles = list(ensembles)
        if not ensembles:
            raise PreconditionError("Nothing to merge")
        spec = ensembles[0].spec
        samples = []
        for ensemble in ensembles:
            if ensemble.spec != spec:
                raise PreconditionError(f"Cannot merge ensembles of {spec} and {ensemble.spec}")
            samples.extend(ensemble.samples)
        provenance = dict(ensembles[0].provenance, chains=len(ensembles))
        return cls(samples, spec, provenance)

    @classmethod
    def single(cls, params, **provenance):
        """A plugin point estimate seen as an ensemble of one."""
        return cls([params], params.spec, provenance)


def save_ensemble(path, ensemble):
    samples = ensemble.require_samples()
    if not all(isinstance(sample, ParamVector) for sample in samples):
        raise PreconditionError("Only network ensembles can be checkpointed")
    payload = MAGIC + struct.pack("<I", len(samples)) + b"".join(encode_params(s) for s in samples)
    return atomic_write_bytes(path, payload)


def load_ensemble(path):
    with open(path, "rb") as handle:
        buffer = handle.read()
    if buffer[:4] != MAGIC:
        raise DataFormatError(path, f"bad ensemble magic {buffer[:4]!r}")
    if len(buffer) < 8:
        raise DataFormatError(path, "truncated ensemble header")
    (count,) = struct.unpack_from("<I", buffer, 4)

    offset = 8
    samples = []
    for _ in range(count):
        params, offset = decode_params(buffer, offset, source=path)
        samples.append(params)
    if offset != len(buffer):
        raise DataFormatError(path, f"{len(buffer) - offset} trailing bytes after {count} samples")
    if not samples:
        raise DataFormatError(path, "ensemble checkpoint holds no samples")

    spec = samples[0].spec
    if any(sample.spec != spec for sample in samples):
        raise DataFormatError(path, "ensemble mixes network architectures")
    return PosteriorEnsemble(samples, spec, {"checkpoint": str(path)})
