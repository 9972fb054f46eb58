"""
Per-class heatmaps as PGM images
================================

"""

from pathlib import Path

import numpy as np
from milab import GenConfig, MilConfig, MilModel, TrainConfig, bound_scores, extract_contributions, generate, train
from milab.heatmap import render_grid, write_pgm

data = generate(GenConfig(num_slides=120, seed=4))
model, _ = train(MilModel(MilConfig(composition="additive")), data, TrainConfig(epochs=15, learning_rate=1e-3))

slide = data.split_slides("test")[0]
scores = bound_scores(extract_contributions(model, slide.bag()))
out = Path("heatmaps_out")
out.mkdir(exist_ok=True)

# 128 is neutral, brighter is excitatory, darker is inhibitory
for c in range(scores.values.shape[0]):
    img = render_grid(scores.values[c], slide.grid_coords)
    write_pgm(out / f"slide{slide.slide_id}_class{c}.pgm", img, f"class {c}")
    print(f"class {c}: min {img.min()} max {img.max()} (slide label {slide.label})")

# planted signal instances of the slide's own class
print(np.argwhere(render_grid(scores.values[slide.label], slide.grid_coords) > 200))
