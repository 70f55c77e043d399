"""Per-sample long/short-term teacher storage and the three-term distillation objective."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, FormatError, PolicyError, ValidationError


class TeacherStore:
    """Raw teacher logits per sample id.

    ``short`` rows are rewritten every epoch; ``long`` rows only during the
    final epoch of a mini-generation.  Rows are readable only once their
    valid flag is set.
    """

    def __init__(self, n: int, num_classes: int):
        self.n = n
        self.num_classes = num_classes
        self.short_logits = np.zeros((n, num_classes))
        self.long_logits = np.zeros((n, num_classes))
        self.short_valid = np.zeros(n, dtype=bool)
        self.long_valid = np.zeros(n, dtype=bool)

    def _check_write(self, ids, logits) -> tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(ids, dtype=np.int64)
        values = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
        if values.shape != (len(ids), self.num_classes):
            raise DimensionError(f"logits shape {values.shape} does not match {len(ids)} ids x {self.num_classes} classes")
        out = ids[(ids < 0) | (ids >= self.n)]
        if out.size:
            raise IndexError(f"sample id {int(out[0])} outside [0, {self.n})")
        if np.unique(ids).size != ids.size:
            raise ValidationError("duplicate sample ids within one batch")
        return ids, values

    def record_short(self, ids, logits) -> None:
        ids, values = self._check_write(ids, logits)
        self.short_logits[ids] = values
        self.short_valid[ids] = True

    def record_long(self, ids, logits, final_epoch: bool) -> None:
        """Write long-term rows; only legal in the last epoch of a mini-generation."""
        if not final_epoch:
            raise PolicyError("long-term teachers may only be written in the final epoch of a mini-generation")
        ids, values = self._check_write(ids, logits)
        self.long_logits[ids] = values
        self.long_valid[ids] = True

    def read(self, ids, which: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        logits, valid = (self.long_logits, self.long_valid) if which == "long" else (self.short_logits, self.short_valid)
        missing = ids[~valid[ids]]
        if missing.size:
            raise ValidationError(f"no {which}-term teacher recorded for sample {int(missing[0])}")
        return logits[ids].copy()

    def copy(self) -> "TeacherStore":
        other = TeacherStore(self.n, self.num_classes)
        other.short_logits = self.short_logits.copy()
        other.long_logits = self.long_logits.copy()
        other.short_valid = self.short_valid.copy()
        other.long_valid = self.long_valid.copy()
        return other

    def dump(self, path: str | os.PathLike) -> None:
        """Binary dump: ``"N C\\n"``, long/short valid bytes, long/short logits (<f8)."""
        body = b"".join(
            [
                f"{self.n} {self.num_classes}\n".encode("ascii"),
                self.long_valid.astype(np.uint8).tobytes(),
                self.short_valid.astype(np.uint8).tobytes(),
                self.long_logits.astype("<f8").tobytes(),
                self.short_logits.astype("<f8").tobytes(),
            ]
        )
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(body)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TeacherStore":
        raw = Path(path).read_bytes()
        nl = raw.find(b"\n")
        try:
            n, c = (int(v) for v in raw[:nl].split())
        except ValueError as err:
            raise FormatError(f"{path}: bad teacher-store header") from err
        body = raw[nl + 1 :]
        expected = 2 * n + 2 * 8 * n * c
        if len(body) != expected:
            raise FormatError(f"{path}: body has {len(body)} bytes, expected {expected}")
        store = cls(n, c)
        store.long_valid = np.frombuffer(body[:n], dtype=np.uint8).astype(bool)
        store.short_valid = np.frombuffer(body[n : 2 * n], dtype=np.uint8).astype(bool)
        mats = np.frombuffer(body[2 * n :], dtype="<f8").astype(np.float64)
        store.long_logits = mats[: n * c].reshape(n, c).copy()
        store.short_logits = mats[n * c :].reshape(n, c).copy()
        return store


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    kl_long: float
    kl_short: float
    total: float
    lambda_long: float
    lambda_short: float

    def recomposed(self) -> float:
        return self.ce + self.lambda_long * self.kl_long + self.lambda_short * self.kl_short


def distill_total(ce: Tensor, kl_long: Tensor | None, kl_short: Tensor | None, lambda_long: float, lambda_short: float):
    """``ce + lambda_long*kl_long + lambda_short*kl_short`` as a tape expression plus its breakdown.

    A missing term contributes nothing and is reported as 0.
    """
    total = ce
    if kl_long is not None:
        total = total + lambda_long * kl_long
    if kl_short is not None:
        total = total + lambda_short * kl_short
    breakdown = LossBreakdown(
        ce=float(ce.data),
        kl_long=float(kl_long.data) if kl_long is not None else 0.0,
        kl_short=float(kl_short.data) if kl_short is not None else 0.0,
        total=float(total.data),
        lambda_long=lambda_long,
        lambda_short=lambda_short,
    )
    return total, breakdown


def assemble_loss(
    student_logits: Tensor,
    labels,
    store: TeacherStore,
    ids,
    lambda_long: float,
    lambda_short: float,
    temperature: float,
    mini_gen_index: int,
    reverse_kl: bool = False,
) -> tuple[Tensor, LossBreakdown]:
    """CE in the first mini-generation; CE plus both weighted KL terms afterwards."""
    ce = ad.cross_entropy(student_logits, labels)
    if mini_gen_index <= 1:
        return distill_total(ce, None, None, lambda_long, lambda_short)
    long_q = ad.softmax_t(store.read(ids, "long"), temperature).data
    short_q = ad.softmax_t(store.read(ids, "short"), temperature).data
    kl_long = ad.kl_divergence(student_logits, long_q, temperature, reverse=reverse_kl)
    kl_short = ad.kl_divergence(student_logits, short_q, temperature, reverse=reverse_kl)
    return distill_total(ce, kl_long, kl_short, lambda_long, lambda_short)
