"""Domain vocabulary: datasets, covariate roles, and adjustment strategies.

The design is a main study / external validation study (MS/EVS) split: the
validation arm observes the true exposure ``x`` next to its surrogate ``z``,
the main arm observes the surrogate ``z`` and the outcome ``y``, and both
arms carry the declared covariates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError

EXPOSURE_COL = "x"
SURROGATE_COL = "z"
OUTCOME_COL = "y"
RESERVED_COLS = (EXPOSURE_COL, SURROGATE_COL, OUTCOME_COL)

STRATEGY_LABELS = ("OM", "--", "-M", "O-")

# dag_index keyed by (affects_x, affects_z, affects_y)
_DAG_INDEX = {
    (False, False, True): 1,
    (False, True, True): 2,
    (True, False, True): 3,
    (True, True, True): 4,
    (False, False, False): 5,
    (False, True, False): 6,
    (True, False, False): 7,
    (True, True, False): 8,
}
_DAG_FLAGS = {v: k for k, v in _DAG_INDEX.items()}


@dataclass(frozen=True)
class DagRole:
    """Structural role of one covariate: which of x, z, y it causes."""

    affects_x: bool
    affects_z: bool
    affects_y: bool

    @property
    def dag_index(self) -> int:
        return _DAG_INDEX[(self.affects_x, self.affects_z, self.affects_y)]

    @property
    def tag(self) -> str:
        """Compact arrow tag, e.g. 'X-Y' for a confounder."""
        return (
            ("X" if self.affects_x else "-")
            + ("Z" if self.affects_z else "-")
            + ("Y" if self.affects_y else "-")
        )

    def __str__(self) -> str:
        return f"V{self.dag_index}({self.tag})"


def classify_role(affects_x: bool, affects_z: bool, affects_y: bool) -> DagRole:
    """Map the three arrow flags onto the unique covariate role (DAG 1..8)."""
    return DagRole(bool(affects_x), bool(affects_z), bool(affects_y))


def role_from_index(dag_index: int) -> DagRole:
    """Inverse of classify_role for a known dag index."""
    if dag_index not in _DAG_FLAGS:
        raise ValueError(f"dag_index must be 1..8, got {dag_index}")
    return DagRole(*_DAG_FLAGS[dag_index])


class Dataset:
    """Column-oriented table of observations for one study arm.

    Construction enforces the structural invariants (equal column lengths,
    finite values, complete cases); arm-specific schema requirements are
    reported by :func:`validate_dataset`.
    """

    __slots__ = ("columns", "arm", "outcome_type", "n")

    def __init__(
        self,
        columns: dict[str, np.ndarray],
        arm: str,
        outcome_type: str = "continuous",
    ):
        if arm not in ("main", "validation"):
            raise ValueError(f"arm must be 'main' or 'validation', got {arm!r}")
        if outcome_type not in ("continuous", "binary"):
            raise ValueError(f"unknown outcome_type {outcome_type!r}")
        if not columns:
            raise ValueError("dataset needs at least one column")
        clean: dict[str, np.ndarray] = {}
        n = None
        for name, values in columns.items():
            arr = np.asarray(values, dtype=np.float64).reshape(-1)
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ValueError(
                    f"column {name!r} has {arr.shape[0]} rows, expected {n}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(
                    f"column {name!r} contains missing or non-finite values "
                    "(complete-case input required)"
                )
            arr.flags.writeable = False
            clean[name] = arr
        if n == 0:
            raise ValueError("dataset has zero rows")
        self.columns = clean
        self.arm = arm
        self.outcome_type = outcome_type
        self.n = int(n)

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def col(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise SchemaError(f"{self.arm} arm is missing column {name!r}")
        return self.columns[name]

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c for c in self.columns if c not in RESERVED_COLS)


def validate_dataset(d: Dataset) -> list[str]:
    """Return schema violations for one arm; an empty list means usable."""
    violations: list[str] = []
    required = (EXPOSURE_COL, SURROGATE_COL) if d.arm == "validation" else (SURROGATE_COL, OUTCOME_COL)
    for name in required:
        if name not in d.columns:
            violations.append(f"{d.arm} arm is missing required column {name!r}")
    if d.outcome_type == "binary" and OUTCOME_COL in d.columns:
        y = d.columns[OUTCOME_COL]
        if not np.all((y == 0.0) | (y == 1.0)):
            bad = y[(y != 0.0) & (y != 1.0)][0]
            violations.append(f"binary outcome column contains {bad:g}, expected 0/1")
    for name in d.covariate_names:
        col = d.columns[name]
        if col.max() == col.min():
            violations.append(f"covariate {name!r} has zero variance")
    return violations


@dataclass(frozen=True)
class AdjustmentStrategy:
    """Where each declared covariate enters: the calibration model, the
    outcome model, both, or neither."""

    covariates: tuple[str, ...]
    in_mem: tuple[str, ...]
    in_outcome: tuple[str, ...]

    def __post_init__(self):
        universe = set(self.covariates)
        for name, group in (("in_mem", self.in_mem), ("in_outcome", self.in_outcome)):
            extra = set(group) - universe
            if extra:
                raise ValueError(f"{name} references undeclared covariates {sorted(extra)}")

    @classmethod
    def from_label(cls, label: str, covariates) -> AdjustmentStrategy:
        """Uniform placement of every covariate per one of the four labels."""
        covariates = tuple(covariates)
        if label == "OM":
            return cls(covariates, covariates, covariates)
        if label == "--":
            return cls(covariates, (), ())
        if label == "-M":
            return cls(covariates, covariates, ())
        if label == "O-":
            return cls(covariates, (), covariates)
        raise ValueError(f"unknown strategy label {label!r}; expected one of {STRATEGY_LABELS}")

    @property
    def label(self) -> str | None:
        """One of OM / -- / -M / O- when the placement is uniform, else None."""
        allc = set(self.covariates)
        mem, out = set(self.in_mem), set(self.in_outcome)
        if mem == allc and out == allc:
            return "OM"
        if not mem and not out:
            return "--"
        if mem == allc and not out:
            return "-M"
        if not mem and out == allc:
            return "O-"
        return None

    def placement(self, covariate: str) -> str:
        """Per-covariate label (OM / -- / -M / O-)."""
        if covariate not in self.covariates:
            raise ValueError(f"{covariate!r} is not declared in this strategy")
        in_m = covariate in self.in_mem
        in_o = covariate in self.in_outcome
        return {(True, True): "OM", (False, False): "--", (True, False): "-M", (False, True): "O-"}[
            (in_m, in_o)
        ]


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Link and interaction structure of the outcome model.

    interaction_covariates lists the covariates whose product with the
    imputed exposure enters the design; they must also sit in the outcome
    model.  An empty tuple with include_interaction=True means every
    outcome-model covariate interacts.
    """

    link: str = "identity"
    include_interaction: bool = False
    interaction_covariates: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.link not in ("identity", "logit"):
            raise ValueError(f"link must be identity or logit, got {self.link!r}")
        if self.interaction_covariates and not self.include_interaction:
            raise ValueError("interaction_covariates given but include_interaction is False")

    def interactions_for(self, outcome_covariates: tuple[str, ...]) -> tuple[str, ...]:
        if not self.include_interaction:
            return ()
        chosen = self.interaction_covariates or outcome_covariates
        missing = set(chosen) - set(outcome_covariates)
        if missing:
            raise ValueError(
                f"interaction terms reference covariates not in the outcome model: {sorted(missing)}"
            )
        return tuple(chosen)
