"""Model ranking, pairwise signed-rank testing and reader-study analysis.

The Wilcoxon test is exact: for n <= 20 non-zero differences the p-value
is computed over all 2^n sign assignments of the tie-averaged absolute
ranks (p = P(W+ >= observed)); larger n falls back to the normal
approximation with tie and continuity corrections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volume import CardinalityError, ConfigurationError

SIGNIFICANCE_LEVEL = 0.05
EXACT_LIMIT = 20


class CompletenessError(ValueError):
    pass


class UndefinedTestError(ValueError):
    pass


class ValidationError(ValueError):
    pass


def tie_average_ranks(values) -> np.ndarray:
    """Ranks 1..n with tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


@dataclass
class RankTable:
    tasks: list[str]
    models: list[str]
    ranks: np.ndarray  # [task][model], 1 = best


def rank_models(means: dict, higher_is_better: bool) -> RankTable:
    """Per-task dense ranking of per-model metric means (ties averaged)."""
    tasks = sorted(means)
    models = sorted({m for task in tasks for m in means[task]})
    grid = np.empty((len(tasks), len(models)), dtype=np.float64)
    for i, task in enumerate(tasks):
        row = means[task]
        for j, model in enumerate(models):
            if model not in row:
                raise CompletenessError(f"missing metric for task {task!r}, model {model!r}")
            grid[i, j] = row[model]
    ranks = np.empty_like(grid)
    for i in range(len(tasks)):
        key = -grid[i] if higher_is_better else grid[i]
        ranks[i] = tie_average_ranks(key)
    return RankTable(tasks=tasks, models=models, ranks=ranks)


def wilcoxon_one_tailed(diffs) -> float:
    """One-tailed signed-rank p-value for the alternative "diffs are positive".

    Zero differences are dropped. Ranks of |diffs| are tie-averaged;
    doubling makes them exact integers, so the exact branch counts sign
    patterns with integer arithmetic only.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise UndefinedTestError("all differences are zero; the test is undefined")
    ranks2 = np.rint(2.0 * tie_average_ranks(np.abs(d))).astype(np.int64)
    w2_obs = int(ranks2[d > 0].sum())
    if n <= EXACT_LIMIT:
        patterns = (np.arange(1 << n, dtype=np.uint64)[:, None] >> np.arange(n)) & 1
        w2 = patterns.astype(np.int64) @ ranks2
        return float(np.count_nonzero(w2 >= w2_obs) / (1 << n))
    w = 0.5 * w2_obs
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(ranks2, return_counts=True)
    var -= float(np.sum(counts.astype(np.float64) ** 3 - counts)) / 48.0
    z = (w - 0.5 - mu) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass
class WilcoxonResult:
    row_model: str
    col_model: str
    n_dominated: int
    p_one_tailed: float | None
    significant: bool


def pairwise_table(table: RankTable) -> dict[tuple[str, str], WilcoxonResult]:
    """For every ordered model pair: dominance count and one-tailed test.

    A cell counts tasks where the row model out-ranks the column model;
    identical rank rows yield a no-test result (p = None).
    """
    if len(table.models) < 2:
        raise CardinalityError("pairwise table needs at least 2 models")
    out: dict[tuple[str, str], WilcoxonResult] = {}
    for i, row in enumerate(table.models):
        for j, col in enumerate(table.models):
            if i == j:
                continue
            diffs = table.ranks[:, j] - table.ranks[:, i]  # positive when row is better
            dominated = int(np.count_nonzero(diffs > 0))
            if np.all(diffs == 0):
                out[(row, col)] = WilcoxonResult(row, col, 0, None, False)
                continue
            p = wilcoxon_one_tailed(diffs)
            out[(row, col)] = WilcoxonResult(row, col, dominated, p, p < SIGNIFICANCE_LEVEL)
    return out


# --- Visual Turing test response analysis -------------------------------

REAL_LABEL = "real"


@dataclass
class Response:
    participant_id: str
    question_id: str
    part: int
    answer: str
    is_sanity: bool = False
    timestamp: str = ""


@dataclass
class ParticipantScore:
    participant_id: str
    real_accuracy: float
    synthetic_accuracy: float
    balanced_accuracy: float
    n: int


@dataclass
class Part1Summary:
    overall_accuracy: float
    real_error_rate: float       # real images labeled AI-generated
    synthetic_error_rate: float  # synthetic images labeled real
    per_modality_accuracy: dict[str, float]
    per_participant: list[ParticipantScore]
    best_participant: str | None
    worst_real_participant: str | None
    worst_synthetic_participant: str | None
    n_real: int
    n_synthetic: int


def _question_index(study):
    return {q.question_id: q for q in study.questions}


def turing_part1_summary(responses: list[Response], study) -> Part1Summary:
    questions = _question_index(study)
    part1 = [q for q in study.questions if q.part == 1]
    if not part1:
        raise ConfigurationError("study defines no part-1 questions")
    n_real = sum(1 for q in part1 if q.volumes[0].label == REAL_LABEL)
    n_synth = len(part1) - n_real

    per_p: dict[str, dict[str, int]] = {}
    per_mod: dict[str, list[int]] = {}
    correct = total = 0
    real_wrong = real_total = synth_wrong = synth_total = 0
    for r in responses:
        if r.part != 1:
            continue
        q = questions.get(r.question_id)
        if q is None or q.part != 1:
            raise ConfigurationError(f"response references unknown part-1 question {r.question_id!r}")
        truth = REAL_LABEL if q.volumes[0].label == REAL_LABEL else "synthetic"
        ok = r.answer == truth
        total += 1
        correct += ok
        stats = per_p.setdefault(r.participant_id,
                                 {"real_ok": 0, "real_n": 0, "synth_ok": 0, "synth_n": 0})
        mod = per_mod.setdefault(q.modality, [0, 0])
        mod[0] += ok
        mod[1] += 1
        if truth == REAL_LABEL:
            real_total += 1
            real_wrong += not ok
            stats["real_n"] += 1
            stats["real_ok"] += ok
        else:
            synth_total += 1
            synth_wrong += not ok
            stats["synth_n"] += 1
            stats["synth_ok"] += ok
    if total == 0:
        raise CardinalityError("no part-1 responses to summarize")

    scores = []
    for pid in sorted(per_p):
        s = per_p[pid]
        real_acc = s["real_ok"] / s["real_n"] if s["real_n"] else math.nan
        synth_acc = s["synth_ok"] / s["synth_n"] if s["synth_n"] else math.nan
        balanced = np.nanmean([real_acc, synth_acc])
        scores.append(ParticipantScore(pid, real_acc, synth_acc, float(balanced),
                                       s["real_n"] + s["synth_n"]))
    best = max(scores, key=lambda s: s.balanced_accuracy).participant_id if scores else None
    with_real = [s for s in scores if not math.isnan(s.real_accuracy)]
    with_synth = [s for s in scores if not math.isnan(s.synthetic_accuracy)]
    worst_real = min(with_real, key=lambda s: s.real_accuracy).participant_id if with_real else None
    worst_synth = (min(with_synth, key=lambda s: s.synthetic_accuracy).participant_id
                   if with_synth else None)
    return Part1Summary(
        overall_accuracy=correct / total,
        real_error_rate=real_wrong / real_total if real_total else math.nan,
        synthetic_error_rate=synth_wrong / synth_total if synth_total else math.nan,
        per_modality_accuracy={m: ok / n for m, (ok, n) in sorted(per_mod.items())},
        per_participant=scores,
        best_participant=best,
        worst_real_participant=worst_real,
        worst_synthetic_participant=worst_synth,
        n_real=n_real,
        n_synthetic=n_synth,
    )


@dataclass
class PreferenceShare:
    pct: dict[str, float]  # model name (or "no-difference") -> percentage
    n: int


@dataclass
class Part2Summary:
    by_pair: dict[tuple[str, str], PreferenceShare]
    by_pair_task: dict[tuple[str, str, str], PreferenceShare]
    sanity_n: int
    sanity_violations: int

    @property
    def sanity_violation_rate(self) -> float:
        return self.sanity_violations / self.sanity_n if self.sanity_n else math.nan


NO_DIFFERENCE = "no-difference"


def turing_part2_summary(responses: list[Response], study) -> Part2Summary:
    questions = _question_index(study)
    counts: dict[tuple[str, str], dict[str, int]] = {}
    counts_task: dict[tuple[str, str, str], dict[str, int]] = {}
    sanity_n = sanity_violations = 0
    for r in responses:
        if r.part != 2:
            continue
        q = questions.get(r.question_id)
        if q is None or q.part != 2:
            raise ConfigurationError(f"response references unknown part-2 question {r.question_id!r}")
        if q.is_sanity:
            sanity_n += 1
            sanity_violations += r.answer != "none"
            continue
        labels = [v.label for v in q.volumes]
        pair = tuple(sorted(labels))
        if r.answer == "a":
            choice = labels[0]
        elif r.answer == "b":
            choice = labels[1]
        elif r.answer == "none":
            choice = NO_DIFFERENCE
        else:
            raise ValidationError(f"part-2 answer must be a/b/none, got {r.answer!r}")
        counts.setdefault(pair, {})[choice] = counts.setdefault(pair, {}).get(choice, 0) + 1
        key = pair + (q.task,)
        counts_task.setdefault(key, {})[choice] = counts_task.setdefault(key, {}).get(choice, 0) + 1

    def shares(c: dict[str, int]) -> PreferenceShare:
        n = sum(c.values())
        return PreferenceShare({k: 100.0 * v / n for k, v in sorted(c.items())}, n)

    return Part2Summary(
        by_pair={k: shares(v) for k, v in counts.items()},
        by_pair_task={k: shares(v) for k, v in counts_task.items()},
        sanity_n=sanity_n,
        sanity_violations=sanity_violations,
    )


@dataclass
class Part3Summary:
    rank_share: dict[str, tuple[float, float, float]]  # model -> % at rank 1/2/3
    counts: dict[str, list[int]] = field(default_factory=dict)
    sanity_n: int = 0
    sanity_violations: int = 0


def parse_rank_answer(answer: str, n_volumes: int = 3) -> list[int]:
    """Answers look like "2-1-3": the rank given to each displayed volume."""
    try:
        ranks = [int(x) for x in answer.replace(",", "-").split("-")]
    except ValueError:
        raise ValidationError(f"cannot parse rank answer {answer!r}") from None
    if sorted(ranks) != list(range(1, n_volumes + 1)):
        raise ValidationError(f"rank answer {answer!r} is not a permutation of 1..{n_volumes}")
    return ranks


def turing_part3_summary(responses: list[Response], study) -> Part3Summary:
    questions = _question_index(study)
    counts: dict[str, list[int]] = {}
    sanity_n = sanity_violations = 0
    for r in responses:
        if r.part != 3:
            continue
        q = questions.get(r.question_id)
        if q is None or q.part != 3:
            raise ConfigurationError(f"response references unknown part-3 question {r.question_id!r}")
        ranks = parse_rank_answer(r.answer, len(q.volumes))
        if q.is_sanity:
            sanity_n += 1
            labels = [v.label for v in q.volumes]
            dupes = {lab for lab in labels if labels.count(lab) > 1}
            for lab in dupes:
                same = [ranks[i] for i, l in enumerate(labels) if l == lab]
                if max(same) - min(same) > 1:
                    sanity_violations += 1
                    break
            continue
        for vol, rank in zip(q.volumes, ranks):
            counts.setdefault(vol.label, [0, 0, 0])[rank - 1] += 1
    share: dict[str, tuple[float, float, float]] = {}
    for label, cs in sorted(counts.items()):
        total = sum(cs)
        if total:
            share[label] = tuple(100.0 * c / total for c in cs)
    return Part3Summary(rank_share=share, counts=counts,
                        sanity_n=sanity_n, sanity_violations=sanity_violations)
