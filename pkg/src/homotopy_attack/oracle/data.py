"""Seeded synthetic image classification set (class templates plus uniform noise).

All classes share one random background in ``[0.2 + contrast, 0.8 - contrast]``.
Class ``c`` adds a random ``+-contrast`` sign pattern on its own ``patch x patch``
cell (all channels), so every template stays inside ``[0.2, 0.8]`` and classes
differ only on a few small regions, the way natural classes differ by a few
discriminative parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SyntheticDataset"]


@dataclass(frozen=True)
class SyntheticDataset:
    """Class templates plus uniform noise of amplitude ``noise``, clipped to ``[0, 1]``.

    Everything is a deterministic function of the constructor arguments. Images
    are ``(H, W, C)`` float64 arrays.
    """

    seed: int = 0
    num_classes: int = 10
    image_shape: tuple[int, int, int] = (12, 12, 3)
    noise: float = 0.1
    contrast: float = 0.06
    patch: int = 3
    train_per_class: int = 500
    test_per_class: int = 100
    templates: np.ndarray = field(init=False, repr=False)
    x_train: np.ndarray = field(init=False, repr=False)
    y_train: np.ndarray = field(init=False, repr=False)
    x_test: np.ndarray = field(init=False, repr=False)
    y_test: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 <= self.noise < 0.2:
            raise ValueError("noise amplitude must be in [0, 0.2) to stay inside [0, 1]")
        if not 0 < self.contrast < 0.3:
            raise ValueError("contrast must be in (0, 0.3)")
        h, w, c = self.image_shape
        cells = [(i, j) for i in range(0, h - self.patch + 1, self.patch)
                 for j in range(0, w - self.patch + 1, self.patch)]
        if len(cells) < self.num_classes:
            raise ValueError(f"only {len(cells)} patch cells for {self.num_classes} classes")
        rng = np.random.default_rng(self.seed)
        background = rng.uniform(0.2 + self.contrast, 0.8 - self.contrast, size=self.image_shape)
        templates = np.repeat(background[None], self.num_classes, axis=0)
        chosen = rng.choice(len(cells), size=self.num_classes, replace=False)
        for label, cell in enumerate(chosen):
            i, j = cells[cell]
            signs = rng.choice([-1.0, 1.0], size=(self.patch, self.patch, c))
            templates[label, i:i + self.patch, j:j + self.patch, :] += self.contrast * signs
        x_train, y_train = self._draw(rng, templates, self.train_per_class)
        x_test, y_test = self._draw(rng, templates, self.test_per_class)
        for name, value in [
            ("templates", templates),
            ("x_train", x_train),
            ("y_train", y_train),
            ("x_test", x_test),
            ("y_test", y_test),
        ]:
            value.flags.writeable = False
            object.__setattr__(self, name, value)

    def _draw(self, rng, templates, per_class):
        labels = np.repeat(np.arange(self.num_classes), per_class)
        labels = labels[rng.permutation(labels.size)]
        noise = rng.uniform(-self.noise, self.noise, size=(labels.size, *self.image_shape))
        return np.clip(templates[labels] + noise, 0.0, 1.0), labels
