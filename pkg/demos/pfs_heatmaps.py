"""
Looking at PFS rows
===================

Picks pixels that sit inside an object and writes each pixel's similarity row
as a grayscale image next to the marked input. Also prints how much of the
row's top decile lands on the pixel's own class, relative to that class's area.
"""

from pathlib import Path

from pfskd.data import DatasetSpec, generate
from pfskd.export import dump, overlap_scores, sample_interior
from pfskd.trainer import TrainConfig, train_teacher

splits = generate(DatasetSpec(n_train=200, n_val=50))
teacher = train_teacher(TrainConfig(epochs=15), splits).net
imgs, lbls = splits["val"]
out = Path("pfs_heatmaps")

############################################################
# Five interior pixels, both the backbone similarity and the learned module

for i, y, x in sample_interior(lbls, 5, seed=0, stride=teacher.spec.output_stride):
    for source in ("feature", "module"):
        dump(teacher, imgs[i], [(y, x)], out, tag=f"val{i}_{source}", source=source)
        s = overlap_scores(teacher, imgs[i], lbls[i], [(y, x)], source=source)[0]
        print(f"image {i} pixel ({y},{x}) class {s.cls} {source:7s} overlap {s.overlap:.2f} "
              f"prior {s.prior:.2f} ratio {s.ratio:.1f}")

print("files in", out.resolve())
