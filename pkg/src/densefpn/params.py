"""Named parameter collections and deterministic initialisation."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter


class ParamSet(dict):
    """Ordered ``name -> Parameter`` mapping that refuses duplicate names."""

    def add(self, name: str, data, dtype=np.float32) -> Parameter:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, dtype=dtype)
        self[name] = p
        return p

    def merge(self, other: "ParamSet") -> "ParamSet":
        for name, p in other.items():
            if name in self:
                raise KeyError(f"duplicate parameter name {name!r}")
            self[name] = p
        return self

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet((k, v) for k, v in self.items() if k.startswith(prefix))

    def count(self) -> int:
        return sum(p.size for p in self.values())

    def astype(self, dtype) -> "ParamSet":
        """Copy with every parameter converted to ``dtype``."""
        out = ParamSet()
        for name, p in self.items():
            out.add(name, p.data.astype(dtype), dtype=dtype)
        return out

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.items():
            yield name, p.data


def make_rng(seed: int) -> np.random.Generator:
    """The single PRNG constructor used for every seeded draw in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 2.0) -> np.ndarray:
    """Uniform in +-sqrt(3 * gain / fan_in); gain 2 is He scaling, gain 1 suits layers without ReLU."""
    bound = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_conv(params: ParamSet, rng, name: str, cout: int, cin: int, k: int, dtype=np.float32,
             std: float | None = None, gain: float = 2.0) -> None:
    shape = (cout, cin, k, k)
    w = he_uniform(rng, shape, cin * k * k, gain) if std is None else rng.normal(0.0, std, size=shape)
    params.add(f"{name}.weight", w, dtype)
    params.add(f"{name}.bias", np.zeros(cout), dtype)


def add_linear(params: ParamSet, rng, name: str, out: int, inp: int, dtype=np.float32, std: float | None = None) -> None:
    """Dense layer; ``std`` switches to a small normal init (used for predictor outputs)."""
    if std is None:
        w = he_uniform(rng, (out, inp), inp)
    else:
        w = rng.normal(0.0, std, size=(out, inp))
    params.add(f"{name}.weight", w, dtype)
    params.add(f"{name}.bias", np.zeros(out), dtype)
