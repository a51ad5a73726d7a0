"""
Two-source data containers with covariate blocks.

Covariates follow one global column order ``(U, Z, V)``: the trial (RCT)
records ``(U, Z)``, the observational study (OS) records ``(Z, V)``.
Treatment is coded -1/+1 throughout.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import BlockUnavailable, DimensionMismatch

logger = logging.getLogger(__name__)

RESERVED_COLUMNS = ("treatment", "outcome", "source")
BLOCKS = ("U", "Z", "V", "X^r", "X^o", "X^r_plus_Vhat")


@dataclass(frozen=True)
class BlockPartition:
    p_u: int
    p_z: int
    p_v: int

    def __post_init__(self):
        if min(self.p_u, self.p_z, self.p_v) < 0:
            raise ValueError("block sizes must be nonnegative")
        if self.p_z < 1:
            raise ValueError("the shared block Z needs at least one column")

    @property
    def p(self):
        return self.p_u + self.p_z + self.p_v

    @property
    def p_r(self):
        return self.p_u + self.p_z

    @property
    def p_o(self):
        return self.p_z + self.p_v

    @property
    def u(self):
        return range(0, self.p_u)

    @property
    def z(self):
        return range(self.p_u, self.p_u + self.p_z)

    @property
    def v(self):
        return range(self.p_u + self.p_z, self.p)

    def source_columns(self, source):
        """Absolute block names stored by a source, in column order."""
        return ("U", "Z") if source == "rct" else ("Z", "V")


@dataclass
class SourceSample:
    """One data source.

    ``covariates`` holds the source's own view: ``(U, Z)`` for the RCT and
    ``(Z, V)`` for the OS. ``v_hat`` may be attached to an RCT sample after
    imputation; ``v_oracle`` carries true V for RCT rows in simulations.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    source: str
    partition: BlockPartition
    v_hat: np.ndarray | None = None
    v_oracle: np.ndarray | None = None

    def __post_init__(self):
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        self.treatment = np.asarray(self.treatment, dtype=float).ravel()
        self.outcome = np.asarray(self.outcome, dtype=float).ravel()
        if self.source not in ("rct", "os"):
            raise ValueError(f"source must be 'rct' or 'os', got {self.source!r}")

    @property
    def n(self):
        return self.covariates.shape[0]

    def arm(self, a):
        return self.treatment == a

    def subset(self, rows):
        rows = np.asarray(rows)
        return replace(
            self,
            covariates=self.covariates[rows],
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            v_hat=None if self.v_hat is None else self.v_hat[rows],
            v_oracle=None if self.v_oracle is None else self.v_oracle[rows],
        )

    def with_v_hat(self, v_hat):
        return replace(self, v_hat=np.asarray(v_hat, dtype=float).reshape(self.n, -1))


@dataclass
class FusedSample:
    rct: SourceSample
    os: SourceSample
    partition: BlockPartition = field(default=None)

    def __post_init__(self):
        if self.partition is None:
            self.partition = self.rct.partition


def _slice(local, start, width):
    return local[:, start : start + width]


def extract_block(sample: SourceSample, block: str) -> np.ndarray:
    """Column slice of a source sample; row order is preserved.

    ``block`` is one of U, Z, V, X^r, X^o or X^r_plus_Vhat. Requests a source
    cannot serve raise :class:`BlockUnavailable`.
    """
    part = sample.partition
    X = sample.covariates
    if block not in BLOCKS:
        raise ValueError(f"unknown block {block!r}")
    if sample.source == "rct":
        if block == "U":
            return _slice(X, 0, part.p_u)
        if block == "Z":
            return _slice(X, part.p_u, part.p_z)
        if block == "X^r":
            return X
        if block == "V":
            if sample.v_oracle is not None:
                return sample.v_oracle
            raise BlockUnavailable("V is not observed in the RCT")
        if block == "X^r_plus_Vhat":
            if sample.v_hat is None:
                raise BlockUnavailable("no imputed V attached to the RCT sample")
            return np.hstack([X, sample.v_hat])
        if block == "X^o":
            if sample.v_oracle is None:
                raise BlockUnavailable("X^o needs V, which the RCT does not observe")
            return np.hstack([_slice(X, part.p_u, part.p_z), sample.v_oracle])
    else:
        if block == "Z":
            return _slice(X, 0, part.p_z)
        if block == "V":
            return _slice(X, part.p_z, part.p_v)
        if block == "X^o":
            return X
        raise BlockUnavailable(f"block {block} is not observed in the OS")
    raise AssertionError("unreachable")


def validate(fused: FusedSample) -> list[str]:
    """Return a list of invariant violations; an empty list means valid."""
    problems = []
    part = fused.partition
    for name, sample, width in (("rct", fused.rct, part.p_r), ("os", fused.os, part.p_o)):
        if sample.source != name:
            problems.append(f"{name}: source label is {sample.source!r}")
        n = sample.n
        if sample.n == 0 and name == "os":
            continue
        if sample.covariates.shape[1] != width:
            problems.append(f"{name}: covariate width {sample.covariates.shape[1]} != {width}")
        if sample.treatment.shape[0] != n or sample.outcome.shape[0] != n:
            problems.append(f"{name}: row count mismatch among covariates/treatment/outcome")
        if not np.all(np.isin(sample.treatment, (-1.0, 1.0))):
            problems.append(f"{name}: treatment coding must be -1/+1")
        arrays = [sample.covariates, sample.treatment, sample.outcome]
        if any(not np.all(np.isfinite(a)) for a in arrays):
            problems.append(f"{name}: missing or non-finite values")
        if sample.v_hat is not None and sample.v_hat.shape != (n, part.p_v):
            problems.append(f"{name}: imputed V has shape {sample.v_hat.shape}")
    arms = set(np.unique(fused.rct.treatment).tolist())
    if fused.rct.n and not {-1.0, 1.0} <= arms:
        problems.append("rct: single-arm RCT")
    return problems


def check_fused(fused: FusedSample):
    problems = validate(fused)
    if problems:
        raise ValueError("invalid FusedSample: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# CSV ingestion


def _remap_treatment(values, path):
    vals = set(np.unique(values).tolist())
    if vals <= {-1.0, 1.0}:
        return values
    if vals <= {0.0, 1.0}:
        logger.warning("%s: treatment coded 0/1, remapping 0 -> -1", path)
        return np.where(values == 1.0, 1.0, -1.0)
    raise ValueError(f"{path}: treatment must be coded -1/1 or 0/1, found {sorted(vals)}")


def read_csv(path, block_map) -> FusedSample:
    """Load a stacked two-source CSV.

    The file carries a header with covariate names plus the reserved columns
    ``treatment``, ``outcome`` and ``source`` (values ``rct``/``os``).
    ``block_map`` is a dict (or path to a JSON sidecar) mapping ``U``, ``Z``
    and ``V`` to lists of column names. Cells in columns a source does not
    observe may be empty; every other cell must be present.
    """
    path = Path(path)
    if not isinstance(block_map, dict):
        block_map = json.loads(Path(block_map).read_text())
    unknown = set(block_map) - {"U", "Z", "V"}
    if unknown:
        raise ValueError(f"block map has unknown keys {sorted(unknown)}")
    names = {k: list(block_map.get(k, [])) for k in ("U", "Z", "V")}
    part = BlockPartition(len(names["U"]), len(names["Z"]), len(names["V"]))

    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in RESERVED_COLUMNS + tuple(names["U"] + names["Z"] + names["V"]):
            if col not in header:
                raise ValueError(f"{path}: missing column {col!r}")
        rows = {"rct": [], "os": []}
        for lineno, row in enumerate(reader, start=2):
            src = row["source"].strip().lower()
            if src not in rows:
                raise ValueError(f"{path}:{lineno}: source must be rct or os, got {row['source']!r}")
            rows[src].append((lineno, row))

    def build(src, cols):
        n = len(rows[src])
        X = np.empty((n, len(cols)))
        a = np.empty(n)
        y = np.empty(n)
        for i, (lineno, row) in enumerate(rows[src]):
            try:
                X[i] = [float(row[c]) for c in cols]
                a[i] = float(row["treatment"])
                y[i] = float(row["outcome"])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: incomplete or non-numeric row ({exc})") from None
        return SourceSample(X, _remap_treatment(a, path), y, src, part)

    rct = build("rct", names["U"] + names["Z"])
    os_ = build("os", names["Z"] + names["V"])
    fused = FusedSample(rct, os_, part)
    check_fused(fused)
    return fused


def as_source_sample(X, treatment, outcome, source, partition, v_oracle=None):
    """Validate raw arrays into a :class:`SourceSample`."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    treatment = np.asarray(treatment, dtype=float).ravel()
    outcome = np.asarray(outcome, dtype=float).ravel()
    if not (X.shape[0] == treatment.shape[0] == outcome.shape[0]):
        raise DimensionMismatch("covariates, treatment and outcome must have equal length")
    width = partition.p_r if source == "rct" else partition.p_o
    if X.shape[0] and X.shape[1] != width:
        raise DimensionMismatch(f"{source} covariates need {width} columns, got {X.shape[1]}")
    return SourceSample(X, treatment, outcome, source, partition, v_oracle=v_oracle)
