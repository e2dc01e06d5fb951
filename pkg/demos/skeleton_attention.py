"""Train ST-GCN and its variational twin on the toy skeleton task and read the learned joint masks.

The variational ST-GCN's attention is input independent, so its mean and
variance come straight from the weights with no sampling.

Run: python3 demos/skeleton_attention.py
"""

import numpy as np

from vgcn.data import gen_skeleton_task, split_indices
from vgcn.metrics import top1
from vgcn.models import ArchConfig, Model
from vgcn.training import TrainConfig, init_from_pretrained, predict_dataset, train
from vgcn.uncertainty import mc_attention

NAMES = ("self", "centripetal", "centrifugal")


def main():
    ds = gen_skeleton_task(120, noise=0.2, seed=0)
    _, _, test_idx = split_indices(len(ds))
    arch = dict(in_channels=2, widths=[8, 8], n_classes=2, n_nodes=7, kt=5)
    stgcn = train(Model(ArchConfig(kind="stgcn", **arch)), ds,
                  TrainConfig(epochs=40, batch_size=16, learning_rate=1e-2)).model
    ivst = train(init_from_pretrained(Model(ArchConfig(kind="vstgcn", **arch)), stgcn, 1e-2), ds,
                 TrainConfig(epochs=20, batch_size=16, learning_rate=5e-3, eval_samples=8)).model
    for name, model, k in (("stgcn", stgcn, 1), ("ivstgcn", ivst, 32)):
        probs, _ = predict_dataset(model, ds, test_idx, k)
        print(f"{name:8s} top1={top1(probs, ds.labels[test_idx]):.3f}")

    np.set_printoptions(precision=3, suppress=True)
    for ua in mc_attention(ivst, ds.samples[0].features, ds.partitions, 2):
        if ua.layer_index != 0:
            continue
        pattern = ds.partitions.partitions[ua.partition] > 0
        print(f"layer 0 {NAMES[ua.partition]}: mean on edges {ua.mean[pattern].round(3)}, "
              f"largest variance {ua.variance.max():.2e} (direct read, n_samples={ua.n_samples})")


if __name__ == "__main__":
    main()
