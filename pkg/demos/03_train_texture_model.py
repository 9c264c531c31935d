"""Demo: train the desk model on the synthetic texture task, twice.

The generator hides the class in the offset between a bright and a dark
dot inside each texture cell. With texture_scale 8 the pair fits inside
the model's 9x9 patches and training succeeds; with texture_scale 24
no patch ever sees both dots and the same recipe stalls near chance.
A shortened schedule keeps this demo around three minutes; the full
20-epoch run lives in tests/test_acceptance.py (criterion 7).

    python demos/03_train_texture_model.py
"""

import pathlib

from bagnet.data import synth_texture_dataset
from bagnet.model import bagnet9_32, build_model
from bagnet.train import TrainConfig, evaluate, save_checkpoint, train

OUT = pathlib.Path(__file__).parent / "output"


def run(texture_scale, epochs):
    print(f"== texture_scale {texture_scale} ==")
    tr = synth_texture_dataset(4, 400, 32, texture_scale, seed=11)
    va = synth_texture_dataset(4, 100, 32, texture_scale, seed=12, split="val")
    model = build_model(bagnet9_32(), seed=1)
    cfg = TrainConfig(epochs=epochs, seed=0)
    ckpt = train(model, tr, va, cfg,
                 sink=lambda r: print("  epoch %2d  lr %.4g  loss %.4f  val %.3f"
                                      % (r["epoch"], r["lr"], r["train_loss"],
                                         r["val_top1"])))
    model.eval_mode()
    acc = evaluate(model, va, k=1).topk_accuracy
    OUT.mkdir(exist_ok=True)
    path = OUT / f"bagnet9_scale{texture_scale}.bagc"
    save_checkpoint(ckpt, path)
    print(f"  final val top-1 {acc:.3f}; checkpoint -> {path}")
    return acc


def main():
    fine = run(texture_scale=8, epochs=12)
    coarse = run(texture_scale=24, epochs=12)
    print(f"== patch-size bottleneck: {fine:.3f} (scale 8) vs {coarse:.3f} (scale 24) ==")


if __name__ == "__main__":
    main()
