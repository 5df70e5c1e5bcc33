"""Masked-autoencoder pre-training followed by segmentation fine-tuning.

A few minutes on one CPU core: pre-train the desk model on unlabelled
phantoms, fine-tune a segmentation head on labelled ones, and compare with
the same model trained from random weights.

    python demos/pretrain_then_segment.py
"""

import time

import torch

from cinema import backbone, dataio, phantom, training

SAX = dataio.GridSpec((2.0, 2.0, 10.0), (64, 64, 4))
LAX = dataio.GridSpec((2.0, 2.0), (64, 64))


def cohort(n, seed):
    return [dataio.preprocess_study(phantom.generate_study(p), SAX, LAX) for p in phantom.sample_cohort(n, seed)]


def main():
    torch.set_num_threads(1)
    cfg = backbone.desk_config()
    print(f"desk model: {backbone.param_count(cfg):,} parameters")

    unlabelled, labelled = cohort(8, 1), cohort(12, 10)
    t = time.time()
    pt_cfg = training.recipe("pretrain", epochs=100, warmup_epochs=5, batch_size=8)
    pre = training.pretrain(cfg, pt_cfg, unlabelled + labelled)
    print(f"pre-trained {pre.checkpoint.step} steps in {time.time() - t:.0f}s, "
          f"loss {pre.history[0]['loss']:.4f} -> {pre.history[-1]['loss']:.4f}")

    train = training.segmentation_examples(labelled, "sax", phases="all")
    val = training.segmentation_examples(cohort(2, 30), "sax")
    test = training.segmentation_examples(cohort(4, 20), "sax")
    tc = training.recipe("segmentation", epochs=10, warmup_epochs=1, batch_size=8, validation_frequency=5)
    for arm in ("finetune", "randinit"):
        t = time.time()
        res = training.finetune("segmentation", train, val, tc, arm=arm, pretrained=pre.checkpoint, model_config=cfg)
        dice = training.score("segmentation", training.predict(res.model, "segmentation", test), test)
        print(f"{arm:9s} held-out Dice {dice:.3f}  ({time.time() - t:.0f}s)")


if __name__ == "__main__":
    main()
