"""Dataset ingestion, batch execution, metric computation, report emission.

Dataset files hold one JSON instance per line with keys instance_id,
image, reference_image (optional), question, options, gold (optional
option letter), subtask, and optionally positive_option and dataset.
Metrics are computed in exact rational arithmetic and rounded half-up to
two decimals only when reported.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from .core import ONE_SHOT, Config, QueryInstance, Subtask
from .knowledge import OPTION_LETTERS
from .latent import ReasoningResult, run_reasoning

CSV_COLUMNS = ("instance_id", "subtask", "dataset", "predicted", "gold",
               "positive_option", "correct", "reward_initial", "reward_final",
               "reward_best", "selected_patches", "error")


def option_letter(index: int | None) -> str | None:
    if index is None:
        return None
    return OPTION_LETTERS[index]


def option_index(letter: str, num_options: int, where: str) -> int:
    if (not isinstance(letter, str) or len(letter) != 1
            or letter not in OPTION_LETTERS[:num_options]):
        raise ValueError(f"{where}: option letter {letter!r} invalid for "
                         f"{num_options} options")
    return OPTION_LETTERS.index(letter)


def load_dataset(path: str | Path) -> list[QueryInstance]:
    """Parse one instance per line; errors name the offending line."""
    instances: list[QueryInstance] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise ValueError(f"{where}: instance must be a map")

            for key in ("instance_id", "image", "question"):
                if not isinstance(record.get(key), str) or not record[key]:
                    raise ValueError(f"{where}: missing or empty {key!r}")
            options = record.get("options")
            if (not isinstance(options, list) or len(options) < 2
                    or not all(isinstance(o, str) and o for o in options)):
                raise ValueError(f"{where}: options must be 2+ non-empty strings")
            subtask_tag = record.get("subtask")
            try:
                subtask = Subtask(subtask_tag)
            except ValueError:
                raise ValueError(f"{where}: unknown subtask tag {subtask_tag!r}") from None

            instance_id = record["instance_id"]
            if instance_id in seen_ids:
                raise ValueError(f"{where}: duplicate instance_id {instance_id!r}")
            seen_ids.add(instance_id)

            gold = record.get("gold")
            positive = record.get("positive_option")
            reference = record.get("reference_image")
            dataset = record.get("dataset")
            if reference is not None and not isinstance(reference, str):
                raise ValueError(f"{where}: reference_image must be a string")
            if dataset is not None and not isinstance(dataset, str):
                raise ValueError(f"{where}: dataset must be a string")

            instances.append(QueryInstance(
                instance_id=instance_id,
                query_image=record["image"],
                reference_image=reference,
                question=record["question"],
                options=tuple(options),
                subtask=subtask,
                gold_option=(None if gold is None
                             else option_index(gold, len(options), where)),
                positive_option=(None if positive is None
                                 else option_index(positive, len(options), where)),
                dataset=dataset,
            ))
    return instances


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def round_percent(value: Fraction) -> float:
    """Convert a proportion to percent, rounded half-up to 2 decimals, exactly."""
    hundredths = value * 100 * 100
    whole = hundredths.numerator // hundredths.denominator
    if hundredths - whole >= Fraction(1, 2):
        whole += 1
    return whole / 100


@dataclass
class RunReport:
    per_subtask_accuracy: dict = field(default_factory=dict)
    macro_average: float | None = None
    discrimination: dict = field(default_factory=dict)
    per_instance: list = field(default_factory=list)
    per_dataset_accuracy: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_subtask_accuracy": dict(self.per_subtask_accuracy),
            "macro_average": self.macro_average,
            "discrimination": dict(self.discrimination),
            "per_instance": [dict(row) for row in self.per_instance],
            "per_dataset_accuracy": dict(self.per_dataset_accuracy),
            "failures": [dict(row) for row in self.failures],
        }

    @classmethod
    def from_json(cls, record: dict) -> "RunReport":
        expected = {"per_subtask_accuracy", "macro_average", "discrimination",
                    "per_instance", "per_dataset_accuracy", "failures"}
        if not isinstance(record, dict) or set(record) != expected:
            raise ValueError("report must carry exactly the RunReport fields")
        return cls(
            per_subtask_accuracy=dict(record["per_subtask_accuracy"]),
            macro_average=record["macro_average"],
            discrimination=dict(record["discrimination"]),
            per_instance=[dict(row) for row in record["per_instance"]],
            per_dataset_accuracy=dict(record["per_dataset_accuracy"]),
            failures=[dict(row) for row in record["failures"]],
        )


def _infer_positive_option(instance: QueryInstance) -> int:
    """The anomalous class: explicit marker first, else the option that says yes."""
    if instance.positive_option is not None:
        return instance.positive_option
    matches = [index for index, text in enumerate(instance.options)
               if text.strip().lower().rstrip(".,!").startswith("yes")]
    if len(matches) != 1:
        raise ValueError(
            f"instance {instance.instance_id!r}: cannot identify the anomalous "
            f"option; set positive_option explicitly")
    return matches[0]


@dataclass(frozen=True)
class ResultRow:
    """Minimal labeled prediction used by the metric computation."""

    instance_id: str
    subtask: str
    predicted: int
    gold: int
    positive: int | None = None
    dataset: str | None = None


def metrics_from_rows(rows: list[ResultRow]) -> RunReport:
    """Accuracy per subtask, macro average, and discrimination metrics."""
    report = RunReport()

    by_subtask: dict[str, list[ResultRow]] = {}
    for row in rows:
        by_subtask.setdefault(row.subtask, []).append(row)

    accuracies: list[Fraction] = []
    for subtask in (s.value for s in Subtask):
        group = by_subtask.get(subtask)
        if not group:
            continue
        correct = sum(1 for row in group if row.predicted == row.gold)
        fraction = Fraction(correct, len(group))
        accuracies.append(fraction)
        report.per_subtask_accuracy[subtask] = round_percent(fraction)
    if accuracies:
        report.macro_average = round_percent(sum(accuracies) / len(accuracies))

    by_dataset: dict[str, list[ResultRow]] = {}
    for row in rows:
        if row.dataset is not None:
            by_dataset.setdefault(row.dataset, []).append(row)
    for dataset in sorted(by_dataset):
        group = by_dataset[dataset]
        correct = sum(1 for row in group if row.predicted == row.gold)
        report.per_dataset_accuracy[dataset] = round_percent(
            Fraction(correct, len(group)))

    discrimination = [row for row in rows
                      if row.subtask == Subtask.ANOMALY_DISCRIMINATION.value]
    tp = fp = fn = tn = 0
    for row in discrimination:
        if row.positive is None:
            raise ValueError(
                f"instance {row.instance_id!r}: discrimination row lacks a "
                f"positive (anomalous) option")
        gold_positive = row.gold == row.positive
        predicted_positive = row.predicted == row.positive
        if gold_positive and predicted_positive:
            tp += 1
        elif gold_positive:
            fn += 1
        elif predicted_positive:
            fp += 1
        else:
            tn += 1

    undefined: list[str] = []

    def ratio(name: str, numerator: int, denominator: int) -> Fraction:
        if denominator == 0:
            undefined.append(name)
            return Fraction(0)
        return Fraction(numerator, denominator)

    accuracy = ratio("accuracy", tp + tn, len(discrimination))
    recall = ratio("recall", tp, tp + fn)
    precision = ratio("precision", tp, tp + fp)
    if precision + recall == 0:
        undefined.append("f1")
        f1 = Fraction(0)
    else:
        f1 = 2 * precision * recall / (precision + recall)

    report.discrimination = {
        "accuracy": round_percent(accuracy),
        "recall": round_percent(recall),
        "precision": round_percent(precision),
        "f1": round_percent(f1),
        "undefined": undefined,
    }
    return report


def _row_from_pair(instance: QueryInstance, predicted: int) -> ResultRow:
    if instance.gold_option is None:
        raise ValueError(f"instance {instance.instance_id!r} has no gold option")
    positive = None
    if instance.subtask is Subtask.ANOMALY_DISCRIMINATION:
        positive = _infer_positive_option(instance)
    return ResultRow(
        instance_id=instance.instance_id,
        subtask=instance.subtask.value,
        predicted=predicted,
        gold=instance.gold_option,
        positive=positive,
        dataset=instance.dataset,
    )


def compute_metrics(results: list[tuple[QueryInstance, int]]) -> RunReport:
    """Metric report over (instance, predicted option index) pairs."""
    missing = [instance.instance_id for instance, _ in results
               if instance.gold_option is None]
    if missing:
        raise ValueError(f"instances without gold options: {missing}")
    return metrics_from_rows([_row_from_pair(instance, predicted)
                              for instance, predicted in results])


# ---------------------------------------------------------------------------
# Batch execution
# ---------------------------------------------------------------------------

def _safe_filename(index: int, instance_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in instance_id)
    return f"{index:04d}_{safe}.json"


def _instance_row(instance: QueryInstance, result: ReasoningResult) -> dict:
    trace = result.trace
    best = max((row.best_reward for row in trace.per_iteration),
               default=trace.final_reward)
    positive = instance.positive_option
    if positive is None and instance.subtask is Subtask.ANOMALY_DISCRIMINATION:
        try:
            positive = _infer_positive_option(instance)
        except ValueError:
            positive = None
    return {
        "instance_id": instance.instance_id,
        "subtask": instance.subtask.value,
        "dataset": instance.dataset,
        "predicted": option_letter(result.final_answer),
        "gold": option_letter(instance.gold_option),
        "correct": (None if instance.gold_option is None
                    else result.final_answer == instance.gold_option),
        "positive_option": option_letter(positive),
        "reward_summary": {
            "initial": trace.initial_reward,
            "final": trace.final_reward,
            "best": best,
        },
        "selected_patches": list(result.selected_patches.indices),
        "explanation": result.explanation,
    }


def run_batch(instances: list[QueryInstance], repo, backend, config: Config,
              out_dir: str | Path, jobs: int = 1,
              render_figures: bool = True) -> RunReport:
    """Run every instance, write traces/report/CSV (and figures), return the report.

    Per-instance failures are recorded and the run continues; the report's
    failures list is the caller's exit-status signal.
    """
    out = Path(out_dir)
    traces_dir = out / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)

    if config.setting != ONE_SHOT:
        instances = [replace(instance, reference_image=None)
                     for instance in instances]

    def run_one(instance: QueryInstance):
        try:
            return run_reasoning(instance, repo, backend, config), None
        except Exception as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if jobs > 1 and len(instances) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_one, instances))
    else:
        outcomes = [run_one(instance) for instance in instances]

    report = RunReport()
    labeled: list[ResultRow] = []
    results: list[tuple[QueryInstance, ReasoningResult | None, str | None]] = []
    for index, (instance, (result, error)) in enumerate(zip(instances, outcomes)):
        results.append((instance, result, error))
        if error is not None:
            report.failures.append({"instance_id": instance.instance_id,
                                    "error": error})
            continue
        report.per_instance.append(_instance_row(instance, result))
        trace_path = traces_dir / _safe_filename(index, instance.instance_id)
        trace_path.write_text(
            json.dumps(result.trace.columns()) + "\n", encoding="utf-8")
        if instance.gold_option is not None:
            labeled.append(_row_from_pair(instance, result.final_answer))

    metrics = metrics_from_rows(labeled)
    report.per_subtask_accuracy = metrics.per_subtask_accuracy
    report.macro_average = metrics.macro_average
    report.discrimination = metrics.discrimination
    report.per_dataset_accuracy = metrics.per_dataset_accuracy

    write_report(report, out / "report.json")
    write_results_csv(results, out / "results.csv")

    if render_figures:
        from .reporting import render_report_figures
        trace_columns = {
            instance.instance_id: result.trace.columns()
            for instance, result, error in results if error is None
        }
        render_report_figures(report, trace_columns, out / "figures")

    return report


def write_report(report: RunReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> RunReport:
    return RunReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_results_csv(results, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for instance, result, error in results:
            if error is not None:
                writer.writerow([instance.instance_id, instance.subtask.value,
                                 instance.dataset or "", "", "", "", "", "", "",
                                 "", "", error])
                continue
            trace = result.trace
            best = max((row.best_reward for row in trace.per_iteration),
                       default=trace.final_reward)
            correct = ("" if instance.gold_option is None
                       else str(result.final_answer == instance.gold_option))
            positive = instance.positive_option
            if positive is None and instance.subtask is Subtask.ANOMALY_DISCRIMINATION:
                try:
                    positive = _infer_positive_option(instance)
                except ValueError:
                    positive = None
            writer.writerow([
                instance.instance_id,
                instance.subtask.value,
                instance.dataset or "",
                option_letter(result.final_answer),
                option_letter(instance.gold_option) or "",
                option_letter(positive) or "",
                correct,
                repr(trace.initial_reward),
                repr(trace.final_reward),
                repr(best),
                " ".join(str(i) for i in result.selected_patches.indices),
                "",
            ])


def rows_from_report(report: RunReport) -> list[ResultRow]:
    """Rebuild metric rows from a report's per-instance table."""
    rows = []
    for row in report.per_instance:
        if row.get("gold") is None:
            continue
        options = len(OPTION_LETTERS)
        rows.append(ResultRow(
            instance_id=row["instance_id"],
            subtask=row["subtask"],
            predicted=option_index(row["predicted"], options, row["instance_id"]),
            gold=option_index(row["gold"], options, row["instance_id"]),
            positive=(None if row.get("positive_option") is None
                      else option_index(row["positive_option"], options,
                                        row["instance_id"])),
            dataset=row.get("dataset"),
        ))
    return rows


def rows_from_csv(path: str | Path) -> list[ResultRow]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        for record in reader:
            if record.get("error") or not record.get("gold"):
                continue
            positive = record.get("positive_option") or None
            rows.append(ResultRow(
                instance_id=record["instance_id"],
                subtask=record["subtask"],
                predicted=option_index(record["predicted"], len(OPTION_LETTERS),
                                       record["instance_id"]),
                gold=option_index(record["gold"], len(OPTION_LETTERS),
                                  record["instance_id"]),
                positive=(None if positive is None
                          else option_index(positive, len(OPTION_LETTERS),
                                            record["instance_id"])),
                dataset=record.get("dataset") or None,
            ))
    return rows
