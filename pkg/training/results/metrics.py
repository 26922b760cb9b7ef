import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

METRICS_SCHEMA = "fm-metrics/1"
TIMING_SCHEMA = "fm-timing/1"
SUMMARY_SCHEMA = "fm-summary/1"


@dataclass(frozen=True)
class RunRecord:
    """Metrics of one finished epoch."""

    epoch: int
    lr: float
    per_head_train_loss: Tuple[float, ...]
    train_acc: float
    val_acc: float
    val_top5: float = float("nan")
    sec_per_iter: float = 0.0
    peak_mem_bytes: int = 0
    iterations: int = 0
    head_names: Tuple[str, ...] = field(default=(), repr=False)

    def names(self):
        if self.head_names:
            return list(self.head_names)
        return ["main"] + [f"aux{i}" for i in range(1, len(self.per_head_train_loss))]

    def to_row(self):
        """Deterministic columns only; timing lives in `to_timing_row`."""
        row = {"epoch": self.epoch, "lr": self.lr, "iterations": self.iterations}
        for name, loss in zip(self.names(), self.per_head_train_loss):
            row[f"loss_{name}"] = loss
        row["loss_total"] = float(math.fsum(self.per_head_train_loss))
        row.update(train_acc=self.train_acc, val_acc=self.val_acc, val_top5=self.val_top5)
        return row

    def to_timing_row(self):
        return {"epoch": self.epoch, "sec_per_iter": self.sec_per_iter, "peak_mem_bytes": self.peak_mem_bytes}


def write_csv(df: pd.DataFrame, path, schema: str):
    """CSV with a `# schema` comment as the first line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf8", newline="") as f:
        f.write(f"# {schema}\n")
        df.to_csv(f, index=False, lineterminator="\n", float_format="%.9g")
    return path


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def records_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records])


def timing_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_timing_row() for r in records])


def write_records(records: Sequence[RunRecord], metrics_path, timing_path=None):
    write_csv(records_frame(records), metrics_path, METRICS_SCHEMA)
    if timing_path is not None:
        write_csv(timing_frame(records), timing_path, TIMING_SCHEMA)


def best_record(records: Sequence[RunRecord]) -> RunRecord:
    """Highest validation accuracy; earliest epoch wins ties. Falls back to the last epoch without validation."""
    scored = [r for r in records if not math.isnan(r.val_acc)]
    if not scored:
        return records[-1]
    return max(scored, key=lambda r: (r.val_acc, -r.epoch))


def mean_std(values) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def summarize_runs(per_seed: List[dict]):
    """
    Mean ± std over seeds.
    :param per_seed: dicts with at least 'seed', 'best_val_acc', 'final_val_acc'
    """
    df = pd.DataFrame(per_seed)
    out = {"runs": int(len(df))}
    for col in ("best_val_acc", "final_val_acc", "best_val_top5"):
        if col in df.columns:
            mean, std = mean_std(df[col])
            out[f"{col}_mean"] = round(mean, 6)
            out[f"{col}_std"] = round(std, 6)
    return out


def summary_frame(per_seed: List[dict]) -> pd.DataFrame:
    rows = pd.DataFrame(per_seed)
    agg = summarize_runs(per_seed)
    tail = pd.DataFrame([{"seed": "mean", "best_val_acc": agg.get("best_val_acc_mean"),
                          "final_val_acc": agg.get("final_val_acc_mean")},
                         {"seed": "std", "best_val_acc": agg.get("best_val_acc_std"),
                          "final_val_acc": agg.get("final_val_acc_std")}])
    return pd.concat([rows.astype({"seed": str}), tail], ignore_index=True)


def overhead_ratios(df: pd.DataFrame):
    """Adds sec/iter and memory ratios against the `baseline` row."""
    base = df.loc[df["variant"] == "baseline"].iloc[0]
    df = df.copy()
    df["time_ratio"] = (df["sec_per_iter"] / base["sec_per_iter"]).round(4)
    df["mem_ratio"] = (df["peak_mem_bytes"] / max(base["peak_mem_bytes"], 1)).round(4)
    return df
