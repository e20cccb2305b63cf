"""
Synthetic change pairs
======================

Render a few synthetic pairs, inspect the changed fraction, and show how a
large image turns into training patches.
"""

import tempfile
from pathlib import Path

import numpy as np

from hpcfnet.data import ImagePair, augment, load_split, sliding_crop, synth_dataset

out = Path(tempfile.mkdtemp()) / "synth"
manifest = synth_dataset(out, seed=7, count=8, size=(64, 64))
pairs = load_split(manifest, "train")
for pair in pairs[:4]:
    print(pair.id, "changed fraction %.3f" % pair.mask.mean())

###############################################################################
# The mask marks pixels where an object appears, disappears or moves.
# Outside it the two images differ only by noise and lighting jitter.

diff = np.abs(pairs[0].t0 - pairs[0].t1).mean(axis=0)
print("mean |t0 - t1| inside mask %.3f, outside %.3f" % (diff[pairs[0].mask == 1].mean(),
                                                         diff[pairs[0].mask == 0].mean()))

###############################################################################
# A 224x1024 street-view panorama yields 15 patches of 224x224 at stride 56,
# each of which gives 8 rotation/mirror variants.

pano = ImagePair(np.zeros((3, 224, 1024)), np.zeros((3, 224, 1024)), np.zeros((224, 1024), np.uint8))
patches = sliding_crop(pano, (224, 224), 56)
print(len(patches), "patches,", sum(len(augment(p)) for p in patches), "augmented records per image")
