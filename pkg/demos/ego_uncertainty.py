"""Train a GAT on the noisy ego task, lift it into a variational model and look at its uncertainty.

Run: python3 demos/ego_uncertainty.py [--out DIR]
"""

import argparse
from pathlib import Path

import numpy as np

from vgcn.data import gen_ego_task, split_indices
from vgcn.metrics import evaluate_predictions
from vgcn.models import ArchConfig, GraphBatch, Model
from vgcn.training import TrainConfig, init_from_pretrained, predict_dataset, train
from vgcn.uncertainty import attention_to_dot, mc_attention


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(exist_ok=True)

    ds = gen_ego_task(300, noise=0.1, seed=args.seed)
    _, _, test_idx = split_indices(len(ds))
    arch = dict(in_channels=4, widths=[8, 8], n_classes=2, mask_mode="direct")

    gat = train(Model(ArchConfig(kind="gat", **arch), seed=args.seed), ds,
                TrainConfig(epochs=60, batch_size=32, learning_rate=1e-2, seed=args.seed)).model
    vgat = init_from_pretrained(Model(ArchConfig(kind="vgat", **arch)), gat, 1e-2)
    vgat = train(vgat, ds, TrainConfig(epochs=30, batch_size=32, learning_rate=1e-2, seed=args.seed,
                                       train_samples_per_input=2, eval_samples=8)).model

    for name, model, k in (("gat", gat, 1), ("ivgat", vgat, 64)):
        probs, var = predict_dataset(model, ds, test_idx, k, seed=args.seed)
        rep = evaluate_predictions(probs, ds.labels[test_idx], k, var)
        print(f"{name:6s} f1={rep.f1:.3f} top1={rep.top1:.3f} entropy={rep.mean_entropy:.3f} "
              f"ece={rep.ece:.3f} mc_se={rep.mc_standard_error:.4f}")

    # wrong predictions should carry more predictive entropy than right ones
    probs, _ = predict_dataset(vgat, ds, test_idx, 64, seed=args.seed)
    ent = -(probs * np.log(np.clip(probs, 1e-12, None))).sum(1)
    wrong = probs.argmax(1) != ds.labels[test_idx]
    if wrong.any():
        print(f"mean entropy right={ent[~wrong].mean():.3f} wrong={ent[wrong].mean():.3f}")

    sample = ds.samples[int(test_idx[0])]
    uas = mc_attention(vgat, sample.features, GraphBatch(sample.graph.adjacency), 64)
    path = out / "ivgat_attention.dot"
    path.write_text(attention_to_dot([u.select(0) for u in uas], "ivgat"))
    print(f"attention graph written to {path}")


if __name__ == "__main__":
    main()
