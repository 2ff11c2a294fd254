"""CSV reports for the three reader-study summaries."""

from __future__ import annotations

import csv
import os

from .stats import (
    Response,
    turing_part1_summary,
    turing_part2_summary,
    turing_part3_summary,
)
from .study import StudyConfig


def write_turing_reports(responses: list[Response], study: StudyConfig, out_dir: str) -> dict:
    """Run all three summaries and emit one CSV per part; returns the summaries."""
    os.makedirs(out_dir, exist_ok=True)
    p1 = turing_part1_summary(responses, study)
    p2 = turing_part2_summary(responses, study)
    p3 = turing_part3_summary(responses, study)

    with open(os.path.join(out_dir, "part1_summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "value"])
        w.writerow(["overall_accuracy", repr(p1.overall_accuracy)])
        w.writerow(["real_error_rate", repr(p1.real_error_rate)])
        w.writerow(["synthetic_error_rate", repr(p1.synthetic_error_rate)])
        w.writerow(["n_real_questions", p1.n_real])
        w.writerow(["n_synthetic_questions", p1.n_synthetic])
        w.writerow(["best_participant", p1.best_participant])
        w.writerow(["worst_real_participant", p1.worst_real_participant])
        w.writerow(["worst_synthetic_participant", p1.worst_synthetic_participant])
        for modality, acc in p1.per_modality_accuracy.items():
            w.writerow([f"accuracy[{modality}]", repr(acc)])

    with open(os.path.join(out_dir, "part1_participants.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["participant_id", "real_accuracy", "synthetic_accuracy",
                    "balanced_accuracy", "n"])
        for s in p1.per_participant:
            w.writerow([s.participant_id, repr(s.real_accuracy), repr(s.synthetic_accuracy),
                        repr(s.balanced_accuracy), s.n])

    with open(os.path.join(out_dir, "part2_preferences.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model_a", "model_b", "task", "pct_a", "pct_b", "pct_no_difference", "n"])
        for (a, b), share in sorted(p2.by_pair.items()):
            w.writerow([a, b, "all", repr(share.pct.get(a, 0.0)), repr(share.pct.get(b, 0.0)),
                        repr(share.pct.get("no-difference", 0.0)), share.n])
        for (a, b, task), share in sorted(p2.by_pair_task.items()):
            w.writerow([a, b, task, repr(share.pct.get(a, 0.0)), repr(share.pct.get(b, 0.0)),
                        repr(share.pct.get("no-difference", 0.0)), share.n])
        w.writerow(["sanity", "sanity", "violation_rate",
                    repr(p2.sanity_violation_rate), "", "", p2.sanity_n])

    with open(os.path.join(out_dir, "part3_ranks.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "pct_rank1", "pct_rank2", "pct_rank3", "n"])
        for model, (r1, r2, r3) in p3.rank_share.items():
            w.writerow([model, repr(r1), repr(r2), repr(r3), sum(p3.counts[model])])
        w.writerow(["sanity_violations", p3.sanity_violations, "of", p3.sanity_n, ""])

    return {"part1": p1, "part2": p2, "part3": p3}
