"""Input ablation on link 1: which branches help predict the SKR."""
import argparse

from _common import evaluate, link_frame, out_dir
from cowqkd import metrics, mlp

VARIANTS = {
    "qber+visibility": ("qber", "visibility"),
    "qber+visibility+history": ("qber", "visibility", "history"),
    "all": ("qber", "visibility", "link_loss", "history"),
    "all+laserpower": ("qber", "visibility", "link_loss", "laserpower", "history"),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--out", default="results/ablation")
    args = ap.parse_args()
    frame, _ = link_frame(1)
    test = mlp.split_frame(frame)[1]
    rows = []
    for name, inputs in VARIANTS.items():
        model = mlp.train(mlp.init(mlp.MlpTopology.from_inputs(inputs), args.seed), frame,
                          mlp.TrainConfig(epochs=args.epochs, seed=args.seed))
        report = evaluate(model, test)
        rows.append(("link1", name, report))
        print(f"{name:26s} test MSE {report.mse:.6f}  MAE {report.mae:8.2f} b/s")
    metrics.write_reports(rows, out_dir(args.out) / "ablation.csv")


if __name__ == "__main__":
    main()
