"""Convert a trained VGAT into its fully integrated variant and sweep the filter limit.

With an infinite limit the converted model keeps the source's predictions;
tighter limits replace uncertain attention entries by a small constant.

Run: python3 demos/fmci_limit_sweep.py
"""

import math

import numpy as np

from vgcn.data import gen_ego_task, split_indices
from vgcn.metrics import f1
from vgcn.models import ArchConfig, Model
from vgcn.training import TrainConfig, init_from_pretrained, predict_dataset, train
from vgcn.uncertainty import FilterConfig, convert_vgat_to_fmci


def main():
    ds = gen_ego_task(300, noise=0.1, seed=1)
    _, _, test_idx = split_indices(len(ds))
    arch = dict(in_channels=4, widths=[8, 8], n_classes=2, mask_mode="direct")
    gat = train(Model(ArchConfig(kind="gat", **arch)), ds,
                TrainConfig(epochs=60, batch_size=32, learning_rate=1e-2)).model
    vgat = train(init_from_pretrained(Model(ArchConfig(kind="vgat", **arch)), gat, 1e-2), ds,
                 TrainConfig(epochs=30, batch_size=32, learning_rate=1e-2, eval_samples=8)).model
    labels = ds.labels[test_idx]
    base, _ = predict_dataset(vgat, ds, test_idx, 128)
    print(f"source vgat       f1={f1(base.argmax(1), labels):.3f}")
    calibration = (ds.samples[0].features, ds.samples[0].graph.adjacency)
    for limit in (math.inf, 1.0, 0.1, 0.01):
        for rule in ("as-written", "consistent"):
            fmci = convert_vgat_to_fmci(vgat, calibration, 64, FilterConfig(limit, 0.01, rule))
            probs, _ = predict_dataset(fmci, ds, test_idx, 128)
            agree = np.mean(probs.argmax(1) == base.argmax(1))
            print(f"limit={limit:<5} {rule:10s} f1={f1(probs.argmax(1), labels):.3f} agreement={agree:.3f}")
            if math.isinf(limit):
                break


if __name__ == "__main__":
    main()
