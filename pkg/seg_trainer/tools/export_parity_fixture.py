"""Regenerate the committed feature-batch fixture used by the reconstruction
package's NT-Xent parity check.

Usage: python tools/export_parity_fixture.py <out_csv>

Trains a small model briefly (deterministic) and exports one batch of 16
pairs; the sidecar JSON carries the trainer-side loss.
"""

import sys
from pathlib import Path

import torch

import seg_trainer as st


def main(out_csv: str) -> None:
    ds = st.BlobPatchDataset(64, 64, seed=1)
    res = st.train(ds, st.TrainConfig(mode="joint", epochs=3, seed=0))
    batch_src = st.BlobPatchDataset(16, 64, seed=42)
    patches = torch.stack([batch_src[i][0] for i in range(16)])
    loss = st.export_feature_batch(
        res.model, res.projection, patches, temperature=0.5, csv_path=Path(out_csv), seed=7
    )
    print(f"wrote {out_csv} (ntxent_loss={loss:.8f})")


if __name__ == "__main__":
    main(sys.argv[1])
