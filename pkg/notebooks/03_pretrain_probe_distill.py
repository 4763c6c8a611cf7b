"""
Masked pre-training, a linear probe and attention distillation
==============================================================

A shrunken version of the acceptance runs: 16x16 images and a 2-block
encoder, so the whole script finishes in about a minute on one core.
"""

# %%
from dataclasses import replace

from vitlite.config import config_from_dict
from vitlite.distill import DistillConfig
from vitlite.experiments import (encoder_from_checkpoint, run_analyze, run_finetune, run_linprobe,
                                 run_pretrain, run_surgery, vit_checkpoint)
from vitlite.vit import ViT, ViTConfig

cfg = config_from_dict({
    "seed": 0,
    "model": {"image_size": 16, "patch_size": 4, "depth": 2, "dim": 32, "heads": 2},
    "dataset": {"image_size": 16, "train_size": 256, "test_size": 128},
    "train": {"epochs": 20, "batch_size": 32, "base_lr": 2e-2, "warmup_epochs": 2},
    "probe": {"epochs": 30, "batch_size": 64, "warmup_epochs": 3, "pool": "gap"},
    "analysis": {"num_examples": 64, "batch_size": 32},
})

# %%
# pre-training: only the masked patches count towards the loss
pre = run_pretrain(cfg)
for row in pre.rows:
    print(f"epoch {row['epoch']}: reconstruction loss {row['loss']:.4f}  lr {row['lr']:.2e}")

# %%
# a linear probe on the frozen encoder, against a random encoder
top1, _, _ = run_linprobe(replace(cfg, command="linprobe"), pre.checkpoint)
rand = ViT(ViTConfig(**cfg.model.to_dict()), seed=0)
top1_rand, _, _ = run_linprobe(replace(cfg, command="linprobe"), vit_checkpoint(rand, "surgery", {}))
print(f"probe top-1: pre-trained {top1:.3f}, random {top1_rand:.3f}")

# %%
# block surgery: keep the first block, redraw the second, then fine-tune
surg = run_surgery(cfg, pre.checkpoint, keep_k=1)
_, rows, _ = run_finetune(replace(cfg, command="finetune"), surg)
print("fine-tune test top-1 by epoch:", [round(r["top1"], 3) for r in rows if r["split"] == "test"])

# %%
# distil the last-block attention of a wider, deeper teacher into a fresh student;
# comparing attention maps later matches heads one-to-one, so the head counts agree
teacher_cfg = replace(cfg, model=replace(cfg.model, depth=3, dim=48, heads=2))
teacher = encoder_from_checkpoint(run_pretrain(teacher_cfg).checkpoint)
dist = run_pretrain(replace(cfg, command="distill", distill=DistillConfig()), teacher)
print("distillation map (teacher heads x student heads)")
print(dist.distiller.maps["distill.0.map"].data.round(3))

for name, ck in (("plain", pre.checkpoint), ("distilled", dist.checkpoint)):
    hm = run_analyze(cfg, "attn", encoder_from_checkpoint(ck), teacher)
    print(f"{name}: S_attn(student block 2, teacher block 3) = "
          f"{hm.matrix[hm.rows.index(2), hm.cols.index(3)]:.3f}")
