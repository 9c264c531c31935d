"""Demo: class-evidence heatmaps and the most informative patches.

Needs the checkpoint written by 03_train_texture_model.py. Exports PPM
heatmaps for a few validation images (with raw-logit CSV sidecars) and
the top patch crops for one class, then re-derives one exported value
through the explicit per-patch route.

    python demos/03_train_texture_model.py
    python demos/04_evidence_heatmaps.py
"""

import pathlib

import numpy as np

from bagnet.data import synth_texture_dataset
from bagnet.interpret import export_heatmap, norm_images, top_patches, write_ppm
from bagnet.model import forward_evidence, image_logits, patch_oracle_evidence
from bagnet.train import load_checkpoint, model_from_checkpoint

OUT = pathlib.Path(__file__).parent / "output"
CKPT = OUT / "bagnet9_scale8.bagc"


def main():
    if not CKPT.exists():
        raise SystemExit(f"run demos/03_train_texture_model.py first ({CKPT} missing)")
    model = model_from_checkpoint(load_checkpoint(CKPT))
    va = synth_texture_dataset(4, 80, 32, 8, seed=12, split="val")

    print("== heatmaps for the first four validation images ==")
    for idx in range(4):
        img = norm_images(model, va, [idx])[0]
        em = forward_evidence(model, img)
        logits = image_logits(em)
        pred = int(np.argmax(logits))
        path = OUT / f"heatmap_img{idx}_class{pred}.ppm"
        export_heatmap(em, pred, path)
        print(f"  image {idx}: label {va.labels[idx]} predicted {pred} "
              f"logit {logits[pred]:.3f} -> {path.name} (+ .csv)")

    print("== top patches for class 0 ==")
    result = top_patches(model, va, cls=0, k=5)
    for rank, rec in enumerate(result.same_label):
        name = f"patch_class0_{rank}_same.ppm"
        write_ppm(OUT / name, rec.pixels.transpose(1, 2, 0))
        print(f"  rank {rank}: image {rec.image_index} loc {rec.location} "
              f"logit {rec.logit:.3f} -> {name}")

    print("== cross-check one heatmap value against the per-patch route ==")
    img = norm_images(model, va, [0])[0]
    fast = forward_evidence(model, img)
    slow = patch_oracle_evidence(model, img)
    gap = np.abs(fast.logits - slow.logits).max()
    print(f"  max |fast - per-patch| over the whole map: {gap:.2e}")


if __name__ == "__main__":
    main()
