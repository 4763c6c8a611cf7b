"""
Tape autodiff and the encoder, step by step
===========================================

Run top to bottom with ``python notebooks/01_tape_and_model.py``; the ``# %%``
markers split it into cells for editors that understand them.
"""

# %%
# a scalar function of a small matrix, differentiated by the tape
import numpy as np
from vitlite import tensor as T

x = T.Tensor(np.array([[0.5, -1.0], [2.0, 0.25]]), requires_grad=True)
y = T.sum(T.gelu(T.matmul(x, x)))
T.backward(y)
print("loss", y.item())
print("tape gradient\n", x.grad)

# %%
# the same gradient by central differences, in float64
ref = x.data.copy()
num = T.numeric_grad(lambda: T.sum(T.gelu(T.matmul(T.Tensor(ref), T.Tensor(ref)))).item(), ref, 1e-6)
print("finite differences\n", num)
print("relative error", T.grad_rel_error(x.grad, num))

# %%
# a synthetic image and how it is cut into patch tokens
from vitlite.data import DatasetSpec, SHAPES, load_split
from vitlite.vit import ViT, ViTConfig, patchify

train = load_split(DatasetSpec(train_size=8, test_size=8), "train")
print("images", train.images.shape, "labels", train.labels, [SHAPES[i] for i in train.labels[:4]])
tokens = patchify(train.images, 4)
print("patch tokens", tokens.shape)  # 64 tokens of 4*4*3 pixels

# %%
# one forward pass with the activation trace switched on
model = ViT(ViTConfig(num_classes=4), seed=0)
with T.no_grad():
    feats, trace = model.forward(train.images, trace=True)
print("features", feats.shape, "representations", len(trace.representations))
for i in range(1, trace.depth + 1):
    a = np.asarray(trace.attention(i).data)
    print(f"block {i} attention logits {a.shape}, spread {a.std():.3f}")

# %%
# the classifier head starts at zero, so every image scores the same
print(model.classify(train.images[:2]).data)
