"""
Negative evidence from look-alike instances
===========================================

Slides may hold instances that sit near another class's signal without
carrying it. An additive model can score them below zero for that class;
attention weights are never negative and cannot say this.
"""

import numpy as np
from milab import GenConfig, MilConfig, MilModel, TrainConfig, extract_contributions, generate, train
from milab.credit import attention_baseline
from milab.synthdata import MIMIC

data = generate(GenConfig(num_slides=300, mimic_fraction=0.1, seed=2))
model, _ = train(MilModel(MilConfig(composition="additive")), data, TrainConfig(epochs=30, learning_rate=1e-3))

negative, total = 0, 0
for slide in data.split_slides("test"):
    mimics = slide.instance_kind == MIMIC
    if not mimics.any():
        continue
    cm = extract_contributions(model, slide.bag())
    target = int(slide.instance_class[mimics][0])
    negative += cm.values[target, mimics].mean() < 0
    total += 1
print(f"mimics pull their look-alike class down in {negative}/{total} test slides")

slide = data.split_slides("test")[0]
print("smallest attention weight on that slide:", attention_baseline(model, slide.bag()).min())
