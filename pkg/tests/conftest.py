"""Shared fixtures: tiny deterministic scenes and one pre-trained scorer.

Training even a toy scorer costs a second or two, so anything reusable
is session-scoped.
"""

import numpy as np
import pytest

from geomimic.geometry import ImagePoint, KernelKind
from geomimic.scene import CameraModel, DemoSequence, FeatureClass, FeatureObservation
from geomimic.training import TrainConfig, train


def make_point(fid, u, v, descriptor, visible=True, cls=FeatureClass.POINT):
    return FeatureObservation(
        id=fid,
        pixel=ImagePoint(float(u), float(v)),
        descriptor=np.asarray(descriptor, dtype=float),
        visible=visible,
        feature_class=cls,
    )


def toy_demo(n_frames=20, seed=0):
    """Three points, three pair candidates, one obviously control-like.

    Point 0 approaches point 1 geometrically while point 2 drifts, so the
    (0, 1) pair is the only association whose error decreases.
    """
    rng = np.random.default_rng(seed)
    desc = {i: rng.uniform(0.0, 1.0, 8) for i in range(3)}
    target = np.array([320.0, 240.0])
    start = np.array([400.0, 310.0])
    drift = np.array([150.0, 120.0])
    frames = []
    for t in range(n_frames):
        mover = target + (start - target) * 0.85**t
        wander = drift + np.array([10.0 * np.sin(0.9 * t), 10.0 * np.cos(1.3 * t)])
        frames.append(
            [
                make_point(0, mover[0], mover[1], desc[0]),
                make_point(1, target[0], target[1], desc[1]),
                make_point(2, wander[0], wander[1], desc[2]),
            ]
        )
    return DemoSequence(
        frames=frames,
        ground_truth=(0, 1),
        camera=CameraModel(),
        seed=seed,
        kernel_kind=KernelKind.P2P,
        mover_ids=(0,),
        target_ids=(1,),
    )


@pytest.fixture(scope="session")
def toy_trained():
    demo = toy_demo()
    return train(demo, KernelKind.P2P, TrainConfig(epochs=150, seed=0))


@pytest.fixture(scope="session")
def toy_demo_20():
    return toy_demo()
