"""
Comparing layers: CKA, attention similarity and attention statistics
====================================================================

Two encoders that differ only in their random seed.  Nothing is trained, so
this runs in a few seconds.
"""

# %%
import numpy as np
from vitlite import analysis as A
from vitlite.data import DatasetSpec, load_split
from vitlite.tensor import no_grad
from vitlite.vit import ViT, ViTConfig

images = load_split(DatasetSpec(test_size=128), "test").images
cfg = ViTConfig(depth=4, dim=64, heads=4)
a, b = ViT(cfg, seed=0), ViT(cfg, seed=1)
with no_grad():
    _, ta = a.forward(images, trace=True)
    _, tb = b.forward(images, trace=True)

# %%
# linear CKA between every pair of layers; index 0 is the patch embedding
hm = A.heatmap(ta, tb, kind="representation")
np.set_printoptions(precision=3, suppress=True)
print(hm.matrix)

# %%
# CKA does not care about rotations or a global scale of the features
x = ta.representations[2].data.reshape(len(images), -1)
q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((x.shape[1], x.shape[1])))
print("cka(x, x)", A.cka(x, x), " cka(x, 3 x Q)", A.cka(x, 3 * x @ q))

# %%
# attention similarity after matching heads one-to-one
att = A.heatmap(ta, tb, kind="attention")
print("rows", att.rows, "cols", att.cols)
print(att.matrix)

# how far a layer's heads are from their best partners in the other model
sigma = A.match_heads_hungarian(ta.attention(1).mean(0), tb.attention(1).mean(0))
print("head matching for block 1:", sigma)

# %%
# entropy and mean attention distance per block (grid units); at initialisation
# the logits are tiny, so every block attends almost uniformly
stats = A.attention_stats(ta)
for i, (e, d) in enumerate(zip(stats.entropy_mean, stats.distance_mean), 1):
    print(f"block {i}: entropy {e:.3f} (uniform {np.log(64):.3f}), distance {d:.3f}")

# %%
# high- minus low-frequency log amplitude of each layer's feature maps
profile = A.fourier_delta_log_amp(ta)
print(np.round(profile.delta, 3))

# %%
# the heatmap as an 8-bit greyscale image
A.write_pgm("cka.pgm", hm.matrix, 0.0, 1.0)
print("wrote cka.pgm", A.read_pgm("cka.pgm").shape)
