"""Automated recognizability scoring and result tables.

A held-out high-accuracy classifier (the judge) scores reconstructions in
place of a human panel: a reconstruction counts as recognized when the
judge's argmax matches the attacked label, and as a majority success when
the judge puts at least 0.5 probability on it. The judge never touches the
attack pipeline, so deleting it changes no attack-side number.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import split_train_test
from .targets import TrainReport, build_target, train_target


class JudgeRejected(RuntimeError):
    """Judge training missed its accuracy gate."""


@dataclass
class JudgeModel:
    model: nn.Model
    report: TrainReport
    seed: int


def train_judge(dataset, seed, epochs=6, test_fraction=1 / 7,
                min_accuracy=0.97) -> JudgeModel:
    """Train the judge on an independent split of the task's data.

    The architecture is the strongest zoo member (two conv stages). A judge
    below min_accuracy test accuracy is rejected outright.
    """
    if dataset.num_classes < 2:
        raise JudgeRejected("degenerate task: need at least 2 classes")
    train_set, test_set = split_train_test(dataset, test_fraction, seed)
    spec = build_target("cnn2", train_set.input_dim, dataset.num_classes)
    model, report = train_target(spec, train_set, test_set, epochs=epochs, seed=seed)
    if report.test_accuracy < min_accuracy:
        raise JudgeRejected(
            f"judge test accuracy {report.test_accuracy:.4f} below the "
            f"{min_accuracy} gate; judge rejected")
    return JudgeModel(model, report, seed)


def judge_reconstruction(judge, image, target_label):
    """Score one reconstruction.

    Returns (predicted class, probability assigned to target_label,
    correct flag). `image` is (c, h, w) or flat, in [-1, 1].
    """
    model = judge.model if isinstance(judge, JudgeModel) else judge
    x = np.asarray(image, dtype=np.float32).reshape(1, -1)
    probs = model.forward(x, "infer")[0]
    pred = int(np.argmax(probs))
    return pred, float(probs[target_label]), pred == int(target_label)


@dataclass
class SurveyProxyReport:
    """Judge results across the attacked classes of one target model."""

    entries: list = field(default_factory=list)  # (label, pred, confidence, correct)

    def add(self, label, pred, confidence, correct):
        self.entries.append((int(label), int(pred), float(confidence), bool(correct)))

    @property
    def average_correct(self):
        if not self.entries:
            return 0.0
        return sum(e[3] for e in self.entries) / len(self.entries)

    @property
    def majority_count(self):
        """Classes where the judge puts >= 0.5 probability on the truth."""
        return sum(1 for e in self.entries if e[2] >= 0.5)


def judge_directory(judge, images_by_label):
    """Score a {label: image} mapping into a SurveyProxyReport."""
    report = SurveyProxyReport()
    for label in sorted(images_by_label):
        pred, conf, correct = judge_reconstruction(judge, images_by_label[label], label)
        report.add(label, pred, conf, correct)
    return report


# ---------------------------------------------------------------------------
# tabular summaries

PER_CLASS_HEADER = ("label", "fidelity", "combined_accuracy", "m_global",
                    "judge_pred", "judge_confidence", "judge_correct")
SUMMARY_HEADER = ("model", "classes", "fidelity", "combined_accuracy",
                  "m_global", "judge_correct_fraction", "majority_count")


@dataclass
class EvalReport:
    model_tag: str
    rows: list                 # per-class tuples matching PER_CLASS_HEADER
    missing_labels: list
    summary: dict

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(PER_CLASS_HEADER) + "\n")
        for row in self.rows:
            buf.write(",".join(_cell(v) for v in row) + "\n")
        buf.write("\n" + ",".join(SUMMARY_HEADER) + "\n")
        s = self.summary
        buf.write(",".join(_cell(s[k]) for k in SUMMARY_HEADER) + "\n")
        return buf.getvalue()

    def to_text(self):
        lines = [_format_table(PER_CLASS_HEADER, self.rows)]
        s = self.summary
        lines.append("")
        lines.append(_format_table(SUMMARY_HEADER, [tuple(s[k] for k in SUMMARY_HEADER)]))
        if self.missing_labels:
            lines.append("")
            lines.append("missing labels: " + ", ".join(map(str, self.missing_labels)))
        return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _format_table(header, rows):
    cells = [list(map(_cell, header))] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    out = []
    for r in cells:
        out.append("  ".join(val.rjust(w) for val, w in zip(r, widths)))
    return "\n".join(out)


def build_report(attack_reports, judge_results, model_tag="target",
                 expected_labels=None) -> EvalReport:
    """Combine per-label attack reports and judge scores into one table.

    attack_reports: {label: AttackReport-like} (needs best_fidelity,
    best_combined_accuracy, best_m_global). judge_results: {label: (pred,
    confidence, correct)}. Missing labels are flagged; the partial report
    is still produced. Averages are the arithmetic mean of present rows.
    """
    labels = sorted(attack_reports)
    if expected_labels is not None:
        missing = sorted(set(expected_labels) - set(labels))
    else:
        missing = []
    rows = []
    for label in labels:
        rep = attack_reports[label]
        pred, conf, correct = judge_results.get(label, (-1, float("nan"), False))
        rows.append((label, rep.best_fidelity, rep.best_combined_accuracy,
                     rep.best_m_global, pred, conf, correct))
    n = len(rows)
    summary = {
        "model": model_tag,
        "classes": n,
        "fidelity": sum(r[1] for r in rows) / n if n else 0.0,
        "combined_accuracy": sum(r[2] for r in rows) / n if n else 0.0,
        "m_global": sum(r[3] for r in rows) / n if n else 0.0,
        "judge_correct_fraction": sum(r[6] for r in rows) / n if n else 0.0,
        "majority_count": sum(1 for r in rows if r[5] >= 0.5),
    }
    return EvalReport(model_tag, rows, missing, summary)
