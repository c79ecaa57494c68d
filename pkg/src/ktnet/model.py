"""Teacher/student completion network with per-stage recovery units (KRA)
and least-squares discriminators (KDA).

Both paths share one encoder and one decoder. The student reads the
transfer layers and the decoder through ``detach`` so its losses cannot
move them; only the encoder and the recovery units learn from partial
shapes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .pointcloud import as_points
from .tensor import ParamGroup, Tensor


@dataclass(frozen=True)
class ModelConfig:
    k: int = 256
    n: int = 3
    n_out: int = 256
    enc_widths: tuple[int, ...] = (128, 256)
    kt_widths: tuple[int, ...] | None = None  # defaults to k at every stage
    dec_hidden: int = 512
    disc_widths: tuple[int, ...] = (256, 64)
    use_kra: bool = True
    use_residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "enc_widths", tuple(self.enc_widths))
        object.__setattr__(self, "disc_widths", tuple(self.disc_widths))
        if self.kt_widths is None:
            object.__setattr__(self, "kt_widths", (self.k,) * self.n)
        object.__setattr__(self, "kt_widths", tuple(self.kt_widths))
        if self.k < 1 or self.n < 0 or self.n_out < 1:
            raise ValueError(f"invalid model dims k={self.k} n={self.n} n_out={self.n_out}")
        if len(self.kt_widths) != self.n:
            raise ValueError(f"kt_widths has {len(self.kt_widths)} entries for n={self.n} stages")

    @property
    def stage_dims(self) -> tuple[int, ...]:
        """Width of the stage-0 feature followed by each transfer stage."""
        return (self.k,) + self.kt_widths

    @property
    def transfer_stages(self) -> tuple[int, ...]:
        """Stages that carry a recovery unit and a discriminator.

        With n = 0 the global feature itself is the only transferred stage.
        """
        return tuple(range(1, self.n + 1)) if self.n > 0 else (0,)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("enc_widths", "kt_widths", "disc_widths"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class StudentFeatures:
    raw: list[Tensor] = field(default_factory=list)
    enhanced: list[Tensor] = field(default_factory=list)


class KTNet:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B74]))
        self.groups = {name: ParamGroup(name) for name in T.GROUP_NAMES}
        c = config

        def dense(group, prefix, fan_in, fan_out, zero=False):
            W = np.zeros((fan_in, fan_out)) if zero else T.glorot_uniform(rng, fan_in, fan_out)
            self.groups[group].add(T.parameter(W, f"{prefix}.W"))
            self.groups[group].add(T.parameter(np.zeros(fan_out), f"{prefix}.b"))

        widths = (3,) + c.enc_widths + (c.k,)
        for i in range(len(widths) - 1):
            dense("theta_FE", f"enc.{i}", widths[i], widths[i + 1])
        dims = c.stage_dims
        for i in range(1, c.n + 1):
            dense("theta_KT", f"kt.{i}", dims[i - 1], dims[i])
        for s in c.transfer_stages:
            d = dims[s]
            dense("theta_KRA", f"kra.{s}.0", d, d)
            dense("theta_KRA", f"kra.{s}.1", d, d, zero=True)
        dense("theta_MLP", "dec.0", dims[-1], c.dec_hidden)
        dense("theta_MLP", "dec.1", c.dec_hidden, 3 * c.n_out)
        for s in c.transfer_stages:
            dw = (dims[s],) + c.disc_widths + (1,)
            for j in range(len(dw) - 1):
                dense("theta_D", f"disc.{s}.{j}", dw[j], dw[j + 1])
        self._params = {p.name: p for g in self.groups.values() for p in g}

    # ------------------------------------------------------------ params
    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def group_of(self, name: str) -> str:
        for g in self.groups.values():
            if name in g.params:
                return g.name
        raise KeyError(name)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in self._params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ValueError(f"parameter {name}: shape {a.shape} does not match model {p.data.shape}")
            p.data[...] = a

    def _p(self, name: str, detached: bool) -> Tensor:
        p = self._params[name]
        return T.detach(p) if detached else p

    def _dense(self, x: Tensor, prefix: str, detached: bool = False) -> Tensor:
        return T.fc(x, self._p(f"{prefix}.W", detached), self._p(f"{prefix}.b", detached))

    # ----------------------------------------------------------- modules
    def encode(self, clouds: Sequence) -> Tensor:
        """Shared point-MLP + max-pool encoder: list of (N_b, 3) clouds -> [B, k]."""
        pts = [as_points(c) for c in clouds]
        if not pts or any(len(p) == 0 for p in pts):
            raise ValueError("encode needs a non-empty batch of non-empty clouds")
        offsets = np.concatenate([[0], np.cumsum([len(p) for p in pts])])
        h = Tensor(np.concatenate(pts, axis=0))
        n_layers = len(self.config.enc_widths) + 1
        for i in range(n_layers):
            h = self._dense(h, f"enc.{i}")
            if i < n_layers - 1:
                h = T.relu(h)
        return T.segment_max(h, offsets)

    def kt_teacher(self, f: Tensor) -> list[Tensor]:
        """Teacher transfer stages; with n = 0 the global feature passes through."""
        self._check_width(f, 0)
        if self.config.n == 0:
            return [f]
        feats = []
        h = f
        for i in range(1, self.config.n + 1):
            h = T.relu(self._dense(h, f"kt.{i}"))
            feats.append(h)
        return feats

    def kra(self, s: int, h: Tensor) -> Tensor:
        return self._dense(T.relu(self._dense(h, f"kra.{s}.0")), f"kra.{s}.1")

    def _enhance(self, s: int, h: Tensor, use_kra: bool, use_residual: bool) -> Tensor:
        if not use_kra:
            return h
        r = self.kra(s, h)
        return h + r if use_residual else r

    def kt_student_features(self, f: Tensor, use_kra: bool | None = None, use_residual: bool | None = None,
                            attach_kt: bool = False, with_raw: bool = True) -> StudentFeatures:
        """Student transfer stages, returning both pre- and post-KRA features.

        ``raw[i]`` is the stage-i feature computed through the transfer
        layers with every recovery unit bypassed; ``enhanced[i]`` is the
        stage feature after the recovery chain. The transfer weights enter
        through ``detach`` unless ``attach_kt`` is set.
        """
        c = self.config
        use_kra = c.use_kra if use_kra is None else use_kra
        use_residual = c.use_residual if use_residual is None else use_residual
        self._check_width(f, 0)
        out = StudentFeatures()
        if c.n == 0:
            out.raw.append(f)
            out.enhanced.append(self._enhance(0, f, use_kra, use_residual))
            return out
        h = f
        raw = f
        for i in range(1, c.n + 1):
            h = T.relu(self._dense(h, f"kt.{i}", detached=not attach_kt))
            h = self._enhance(i, h, use_kra, use_residual)
            out.enhanced.append(h)
            if not with_raw:
                continue
            if use_kra:
                with T.no_grad():
                    raw = T.relu(self._dense(raw, f"kt.{i}", detached=True))
                out.raw.append(raw)
            else:
                out.raw.append(h)
        return out

    def kt_student(self, f: Tensor, use_kra: bool | None = None, use_residual: bool | None = None,
                   attach_kt: bool = False) -> list[Tensor]:
        return self.kt_student_features(f, use_kra, use_residual, attach_kt, with_raw=False).enhanced

    def kda_score(self, stage: int, f: Tensor, detach_params: bool = False) -> Tensor:
        """Least-squares discriminator score [B, 1] for a stage feature."""
        if stage not in self.config.transfer_stages:
            raise ValueError(f"no discriminator for stage {stage}; stages are {self.config.transfer_stages}")
        self._check_width(f, stage)
        n_layers = len(self.config.disc_widths) + 1
        h = f
        for j in range(n_layers):
            h = self._dense(h, f"disc.{stage}.{j}", detached=detach_params)
            if j < n_layers - 1:
                h = T.relu(h)
        return h

    def restore(self, f: Tensor, detach_params: bool = False) -> Tensor:
        """Decoder: [B, d_n] -> [B, N_out, 3]."""
        self._check_width(f, len(self.config.stage_dims) - 1)
        h = T.relu(self._dense(f, "dec.0", detach_params))
        h = self._dense(h, "dec.1", detach_params)
        return T.reshape(h, (f.shape[0], self.config.n_out, 3))

    def _check_width(self, f: Tensor, stage: int):
        d = self.config.stage_dims[stage]
        if f.data.ndim != 2 or f.shape[1] != d:
            raise T.ShapeError(f"stage {stage} expects features of shape [B, {d}], got {f.shape}")

    # ------------------------------------------------------------- paths
    def teacher_forward(self, Y_in: Sequence) -> Tensor:
        return self.restore(self.kt_teacher(self.encode(Y_in))[-1])

    def student_forward(self, X_in: Sequence) -> Tensor:
        """Inference path: partial clouds -> completed clouds [B, N_out, 3]."""
        return self.restore(self.kt_student(self.encode(X_in))[-1], detach_params=True)

    def complete(self, X_in: Sequence, batch_size: int = 32) -> np.ndarray:
        """Gradient-free completion of many partial clouds."""
        out = []
        with T.no_grad():
            for i in range(0, len(X_in), batch_size):
                out.append(self.student_forward(X_in[i:i + batch_size]).data.copy())
        return np.concatenate(out, axis=0)
