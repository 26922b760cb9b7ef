"""
Turn run CSVs into HTML figures.

    python plot_results.py runs/desk                # metrics.csv curves
    python plot_results.py runs/desk/probe --kind activations
    python plot_results.py runs/ablation --kind ablation
"""
import argparse
from pathlib import Path

import plotly.graph_objs as go
from plotly.subplots import make_subplots

from training.results.metrics import read_csv


def training_curves(run_dir: Path):
    df = read_csv(run_dir / "metrics.csv")
    fig = make_subplots(rows=1, cols=2, subplot_titles=("train loss per head", "accuracy"))
    for col in [c for c in df.columns if c.startswith("loss_") and c != "loss_total"]:
        fig.add_trace(go.Scatter(x=df["epoch"], y=df[col], mode="lines", name=col[5:]), row=1, col=1)
    for col in ("train_acc", "val_acc"):
        fig.add_trace(go.Scatter(x=df["epoch"], y=df[col], mode="lines+markers", name=col), row=1, col=2)
    fig.update_layout(title=f"Training: {run_dir}")
    return fig


def activation_bars(probe_dir: Path):
    df = read_csv(probe_dir / "activation_counts.csv")
    fig = go.Figure()
    for checkpoint, group in df.groupby("checkpoint", sort=False):
        fig.add_trace(go.Bar(x=group["layer"], y=group["count_per_sample"], name=str(checkpoint)))
    fig.update_layout(barmode="group", title="Activations above threshold per sample",
                      yaxis_title="count per sample")
    return fig


def ablation_bars(run_dir: Path):
    df = read_csv(run_dir / "ablation.csv")
    fig = go.Figure(go.Bar(x=df["variant"], y=df["best_val_acc_mean"],
                           error_y=dict(type="data", array=df["best_val_acc_std"])))
    fig.update_layout(title="Best validation accuracy by variant (mean ± std over seeds)")
    return fig


PLOTS = {"curves": training_curves, "activations": activation_bars, "ablation": ablation_bars}


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("path", help="Run directory holding the CSV")
    parser.add_argument("--kind", choices=sorted(PLOTS), default="curves", help="Which figure to draw")
    parser.add_argument("--out", default=None, help="HTML output path (default: <path>/<kind>.html)")
    args = parser.parse_args()
    path = Path(args.path)
    fig = PLOTS[args.kind](path)
    out = Path(args.out) if args.out else path / f"{args.kind}.html"
    fig.write_html(str(out))
    print(f"wrote {out}")
