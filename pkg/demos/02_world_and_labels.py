"""Synthetic driving episodes: scene, camera views, voxels, trajectories and text."""
import numpy as np

from occvla import annotate as A
from occvla.scene import CLASS_NAMES, generate_episode

ep = generate_episode(seed=7, episode_id=0)

########### What an episode holds
print("views", ep.views.shape, ep.views.dtype)          # 4 cameras, 32x32 RGB
print("grid ", ep.grid.shape, ep.grid.dtype)            # 32 x 32 x 8 semantic voxels
print("layout", ep.scene.layout)
counts = np.bincount(ep.grid.ravel(), minlength=len(CLASS_NAMES))
for name, n in zip(CLASS_NAMES, counts):
    print(f"  {name:<10} {n:5d}")

########### Trajectories in the ego frame: t, x, y, heading, speed
np.set_printoptions(precision=2, suppress=True)
print(ep.past_traj)
print(ep.future_traj)

########### Meta action from the future trajectory alone
A.annotate_episode(ep)              # fills ep.meta and the reasoning texts in place
print("meta", ep.meta, "| mean accel", round(A.mean_acceleration(A.future_with_origin(ep)), 3))
print("mirrored", A.mirror_meta(ep.meta))

########### Supervision text
print("caption:", ep.texts["caption"])
print("reasoning prompt:", ep.texts["cot_prefix"])
print("reasoning target:", ep.texts["cot"])
for item in ep.texts["qa"][:4]:
    print(f"  [{item['category']}/{item['hop']}] {item['question']} -> {item['answer']}")
print("parsed back:", A.parse_meta(ep.texts["cot"]))
