"""Performance statistics: per-patient and pooled Cohen's kappa, accuracy,
confusion matrices, sleep measures and their agreement (MAE, Bland-Altman),
the Wilcoxon signed-rank test, and the standardized-coefficient error
regression of per-patient kappa on patient covariates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg as sp_linalg
from scipy import stats as sp_stats

from .records import PatientMeta, Sex
from .staging import StageTask, collapse_array

EPOCH_MINUTES = 0.5


class EmptyDataset(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class TooFewPairs(ValueError):
    pass


# ---------------------------------------------------------------------------
# Kappa and confusion

def confusion_matrix(ref, pred, n_classes: int, mask=None) -> np.ndarray:
    """Counts with rows = reference, columns = prediction."""
    ref = np.asarray(ref, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        ref, pred = ref[mask], pred[mask]
    flat = np.bincount(ref * n_classes + pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def kappa_from_confusion(cm: np.ndarray) -> float:
    """Cohen's kappa from integer counts, exact until the final division.

    Degenerate convention: when chance agreement is 1 (both raters constant
    on the same class) the score is 1; constant-but-different raters fall
    out of the formula as 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise EmptyDataset("empty confusion matrix")
    agree = int(np.trace(cm))
    chance = int(cm.sum(axis=1) @ cm.sum(axis=0))
    denom = n * n - chance
    if denom == 0:
        return 1.0
    return float((n * agree - chance) / denom)


def cohen_kappa(ref, pred, mask=None, n_classes: int | None = None) -> float:
    ref = np.asarray(ref, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        ref, pred = ref[mask], pred[mask]
    if len(ref) != len(pred):
        raise LengthMismatch(f"{len(ref)} reference vs {len(pred)} predicted epochs")
    if len(ref) == 0:
        raise EmptyDataset("no masked-in epochs")
    if n_classes is None:
        n_classes = int(max(ref.max(), pred.max())) + 1
    return kappa_from_confusion(confusion_matrix(ref, pred, n_classes))


def accuracy_from_confusion(cm: np.ndarray) -> float:
    return float(np.trace(cm) / cm.sum())


# ---------------------------------------------------------------------------
# Sleep measures

@dataclass
class SleepMeasures:
    """TST (minutes), sleep efficiency (%), stage fractions of sleep time (%).

    Fractions are undefined (None) for a night with no sleep.
    """

    tst_min: float
    se_pct: float
    fr_light_pct: float | None
    fr_deep_pct: float | None
    fr_rem_pct: float | None

    FIELDS = ("tst_min", "se_pct", "fr_light_pct", "fr_deep_pct", "fr_rem_pct")


def sleep_measures(stages, mask=None) -> SleepMeasures:
    """Stage-count measures over masked-in epochs (30 s = 0.5 min each)."""
    stages = np.asarray(stages, dtype=np.int64)
    if mask is not None:
        stages = stages[np.asarray(mask, dtype=bool)]
    counts = np.bincount(stages, minlength=4)
    wake_min = counts[0] * EPOCH_MINUTES
    light_min = counts[1] * EPOCH_MINUTES
    deep_min = counts[2] * EPOCH_MINUTES
    rem_min = counts[3] * EPOCH_MINUTES
    tst = light_min + deep_min + rem_min
    se = 100.0 * tst / (tst + wake_min) if tst + wake_min > 0 else 0.0
    if tst > 0:
        fr = (100.0 * light_min / tst, 100.0 * deep_min / tst, 100.0 * rem_min / tst)
    else:
        fr = (None, None, None)
    return SleepMeasures(tst, se, *fr)


@dataclass
class AgreementStats:
    mae: float
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    n: int


def measure_agreement(pred: list[float], ref: list[float]) -> AgreementStats:
    """MAE plus Bland-Altman statistics of pred - ref differences.

    The SD of differences is the population form (1/n), matching limits of
    agreement at mean +/- 1.96 SD.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise LengthMismatch(f"{pred.shape} vs {ref.shape}")
    if len(pred) < 2:
        raise LengthMismatch("agreement needs at least 2 pairs")
    diff = pred - ref
    mae = float(np.mean(np.abs(diff)))
    mean_diff = float(diff.mean())
    sd_diff = float(diff.std())
    return AgreementStats(
        mae=mae,
        mean_diff=mean_diff,
        sd_diff=sd_diff,
        loa_low=mean_diff - 1.96 * sd_diff,
        loa_high=mean_diff + 1.96 * sd_diff,
        n=len(pred),
    )


# ---------------------------------------------------------------------------
# Dataset-level evaluation

@dataclass
class PatientEval:
    """One patient's 4-class reference and prediction with the shared mask."""

    record_id: str
    ref: np.ndarray
    pred: np.ndarray
    mask: np.ndarray


@dataclass
class MetricsReport:
    task: str
    class_names: tuple[str, ...]
    record_ids: list[str]
    kappa_per_patient: list[float]
    kappa_median: float
    kappa_q1: float
    kappa_q3: float
    kappa_overall: float
    kappa_patient_mean: float
    accuracy: float
    confusion: np.ndarray
    n_patients: int
    n_epochs: int
    sleep_measure_errors: dict[str, AgreementStats] = field(default_factory=dict)
    # per-patient measure values behind the agreement stats (plot/CSV source)
    measure_pairs: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "class_names": list(self.class_names),
            "record_ids": self.record_ids,
            "kappa_per_patient": self.kappa_per_patient,
            "kappa_median": self.kappa_median,
            "kappa_q1": self.kappa_q1,
            "kappa_q3": self.kappa_q3,
            "kappa_overall": self.kappa_overall,
            "kappa_patient_mean": self.kappa_patient_mean,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "n_patients": self.n_patients,
            "n_epochs": self.n_epochs,
            "sleep_measure_errors": {
                k: vars(v) for k, v in self.sleep_measure_errors.items()
            },
            "measure_pairs": self.measure_pairs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        sme = {
            k: AgreementStats(**v) for k, v in d.get("sleep_measure_errors", {}).items()
        }
        return cls(
            task=d["task"],
            class_names=tuple(d["class_names"]),
            record_ids=list(d["record_ids"]),
            kappa_per_patient=list(d["kappa_per_patient"]),
            kappa_median=d["kappa_median"],
            kappa_q1=d["kappa_q1"],
            kappa_q3=d["kappa_q3"],
            kappa_overall=d["kappa_overall"],
            kappa_patient_mean=d["kappa_patient_mean"],
            accuracy=d["accuracy"],
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            n_patients=d["n_patients"],
            n_epochs=d["n_epochs"],
            sleep_measure_errors=sme,
            measure_pairs=d.get("measure_pairs", {}),
        )


def evaluate_dataset(patients: list[PatientEval], task: StageTask) -> MetricsReport:
    """Kappa-per-patient list, pooled kappa/accuracy and confusion matrix.

    Inputs are 4-class; the task collapse is applied before counting.
    Padded/unscored epochs are excluded everywhere via the masks; patients
    with no valid epochs are skipped. Sleep-measure agreement is computed
    from the 4-class stages regardless of the reporting task.
    """
    k = task.n_classes
    kappas: list[float] = []
    ids: list[str] = []
    pooled = np.zeros((k, k), dtype=np.int64)
    measures_pred: dict[str, list[float]] = {f: [] for f in SleepMeasures.FIELDS}
    measures_ref: dict[str, list[float]] = {f: [] for f in SleepMeasures.FIELDS}
    for pe in patients:
        mask = np.asarray(pe.mask, dtype=bool)
        if mask.sum() == 0:
            continue
        ref_c = collapse_array(pe.ref, task)
        pred_c = collapse_array(pe.pred, task)
        cm = confusion_matrix(ref_c, pred_c, k, mask)
        pooled += cm
        kappas.append(kappa_from_confusion(cm))
        ids.append(pe.record_id)
        sm_ref = sleep_measures(pe.ref, mask)
        sm_pred = sleep_measures(pe.pred, mask)
        for name in SleepMeasures.FIELDS:
            r, p = getattr(sm_ref, name), getattr(sm_pred, name)
            if r is not None and p is not None:
                measures_ref[name].append(r)
                measures_pred[name].append(p)
    if not kappas:
        raise EmptyDataset("no patients with valid epochs")
    agreement = {
        name: measure_agreement(measures_pred[name], measures_ref[name])
        for name in SleepMeasures.FIELDS
        if len(measures_ref[name]) >= 2
    }
    pairs = {
        name: {"pred": measures_pred[name], "ref": measures_ref[name]}
        for name in agreement
    }
    q1, med, q3 = np.quantile(kappas, [0.25, 0.5, 0.75])
    return MetricsReport(
        task=task.value,
        class_names=task.class_names,
        record_ids=ids,
        kappa_per_patient=[float(x) for x in kappas],
        kappa_median=float(med),
        kappa_q1=float(q1),
        kappa_q3=float(q3),
        kappa_overall=kappa_from_confusion(pooled),
        kappa_patient_mean=float(np.mean(kappas)),
        accuracy=accuracy_from_confusion(pooled),
        confusion=pooled,
        n_patients=len(kappas),
        n_epochs=int(pooled.sum()),
        sleep_measure_errors=agreement,
        measure_pairs=pairs,
    )


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test

@dataclass
class WilcoxonResult:
    statistic: float  # W+: rank sum of positive differences
    p_value: float
    n: int
    method: str


def _exact_two_sided_p(ranks: np.ndarray, w_plus: float) -> float:
    """Exact null distribution of W+ by subset-sum counting over the
    observed ranks (doubled so tied half-ranks become integers)."""
    r2 = np.round(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    dist = np.zeros(total + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = dist + shifted
    dist /= dist.sum()
    w2 = int(round(2.0 * w_plus))
    cdf_low = dist[: w2 + 1].sum()
    cdf_high = dist[w2:].sum()
    return float(min(1.0, 2.0 * min(cdf_low, cdf_high)))


def _normal_two_sided_p(ranks: np.ndarray, w_plus: float, n: int) -> float:
    """Normal approximation with continuity and tie corrections."""
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(counts**3 - counts)) / 48.0
    sd = math.sqrt(var)
    delta = w_plus - mu
    z = (delta - 0.5 * np.sign(delta)) / sd if sd > 0 else 0.0
    return float(math.erfc(abs(z) / math.sqrt(2.0)))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided paired test; zero differences are discarded.

    The exact branch enumerates the null distribution (n <= 25, or forced
    with method="exact"); larger samples use the continuity- and
    tie-corrected normal approximation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n < 5:
        raise TooFewPairs(f"{n} non-zero differences, need >= 5")
    ranks = sp_stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= 25 else "normal"
    if method == "exact":
        p = _exact_two_sided_p(ranks, w_plus)
    elif method == "normal":
        p = _normal_two_sided_p(ranks, w_plus, n)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(statistic=w_plus, p_value=p, n=n, method=method)


# ---------------------------------------------------------------------------
# Error-analysis regression

@dataclass
class RegressionTerm:
    name: str
    coef: float
    se: float
    t: float
    p: float


@dataclass
class RegressionResult:
    terms: list[RegressionTerm]
    dropped: list[str]
    n: int
    dof: int
    r_squared: float

    def term(self, name: str) -> RegressionTerm:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "terms": [vars(t) for t in self.terms],
            "dropped": self.dropped,
            "n": self.n,
            "dof": self.dof,
            "r_squared": self.r_squared,
        }


def error_regression(
    kappa_p: list[float],
    metas: list[PatientMeta],
    dataset_tags: list[str],
) -> RegressionResult:
    """Least squares of per-patient kappa on standardized covariates.

    Continuous covariates (age, AHI, BMI) are z-scored; sex enters as a
    male dummy (female reference); ethnicity and dataset enter as dummies
    against their most frequent / first level. Only complete cases are
    used (>= 10 required). Collinear columns are dropped via pivoted QR
    and reported instead of failing.
    """
    rows = [
        i
        for i, m in enumerate(metas)
        if m.age is not None and m.ahi is not None and m.bmi is not None and m.sex != Sex.UNKNOWN
    ]
    if len(rows) < 10:
        raise ValueError(f"{len(rows)} complete cases, need >= 10")
    y = np.asarray([kappa_p[i] for i in rows], dtype=np.float64)
    n = len(rows)

    def zscore(values):
        v = np.asarray(values, dtype=np.float64)
        sd = v.std()
        return (v - v.mean()) / sd if sd > 0 else np.zeros_like(v)

    cols = [np.ones(n)]
    names = ["intercept"]
    cols.append(zscore([metas[i].age for i in rows]))
    names.append("age")
    cols.append(zscore([metas[i].ahi for i in rows]))
    names.append("ahi")
    cols.append(zscore([metas[i].bmi for i in rows]))
    names.append("bmi")
    cols.append(np.asarray([1.0 if metas[i].sex == Sex.MALE else 0.0 for i in rows]))
    names.append("sex_male")

    eth = [metas[i].ethnicity or "unknown" for i in rows]
    levels, counts = np.unique(eth, return_counts=True)
    if len(levels) > 1:
        reference = levels[np.argmax(counts)]
        for lv in levels:
            if lv == reference:
                continue
            cols.append(np.asarray([1.0 if e == lv else 0.0 for e in eth]))
            names.append(f"ethnicity_{lv}")

    tags = [dataset_tags[i] for i in rows]
    tag_levels = sorted(set(tags))
    for lv in tag_levels[1:]:
        cols.append(np.asarray([1.0 if t == lv else 0.0 for t in tags]))
        names.append(f"dataset_{lv}")

    X = np.column_stack(cols)
    q, r, piv = sp_linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    kept = sorted(piv[:rank])
    dropped = [names[j] for j in sorted(piv[rank:])]
    Xk = X[:, kept]

    beta, *_ = np.linalg.lstsq(Xk, y, rcond=None)
    resid = y - Xk @ beta
    dof = n - rank
    if dof <= 0:
        raise ValueError("no residual degrees of freedom")
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(Xk.T @ Xk)
    se = np.sqrt(np.diag(cov))
    tvals = beta / se
    pvals = 2.0 * sp_stats.t.sf(np.abs(tvals), dof)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 0.0
    terms = [
        RegressionTerm(names[j], float(beta[i]), float(se[i]), float(tvals[i]), float(pvals[i]))
        for i, j in enumerate(kept)
    ]
    return RegressionResult(terms=terms, dropped=dropped, n=n, dof=dof, r_squared=r2)


# ---------------------------------------------------------------------------
# Serialization

def save_report_json(path, report: MetricsReport) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_report_json(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def save_patient_kappa_csv(path, report: MetricsReport) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["record_id", "kappa"])
        for rid, k in zip(report.record_ids, report.kappa_per_patient):
            writer.writerow([rid, repr(k)])
    return path


def save_confusion_csv(path, report: MetricsReport) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ref\\pred", *report.class_names])
        for name, row in zip(report.class_names, report.confusion):
            writer.writerow([name, *[int(x) for x in row]])
    return path
