"""Follow one moving object back through the history frames.

For a single-object scene, projects the object's current box center into each
past frame twice: once with ego-motion only, once also rewinding the object's
own constant velocity. Only the second lands on the rendered blob. Then shows
how the long-term suppression factor weights the frames when fusing.

    python3 demos/temporal_sampling.py [seed]
"""

import sys

import numpy as np

from bevinst.branch import temporal_fuse
from bevinst.geometry import compensate_and_warp, project_points, temporal_transform
from bevinst.grid_ops import LinearMap
from bevinst.scene import SceneConfig, generate_scene, object_positions_ego, object_velocities_ego, render_features


def blob_peak(grid, channel):
    iy, ix = np.unravel_index(np.argmax(grid.data[channel]), grid.data[channel].shape)
    return np.array([ix, iy], dtype=float)


def main(seed: int = 0) -> None:
    scene = generate_scene(SceneConfig(num_regular=1, num_small=0, regular_speed=(6.0, 8.0)), seed)
    track = scene.tracks[0]
    pos, vel = object_positions_ego(scene, 0)[0], object_velocities_ego(scene, 0)[0]
    print(f"object at {np.round(pos, 2)} m (ego frame), velocity {np.round(vel, 2)} m/s, tau = {scene.tau} s\n")
    print(f"{'t':>2} {'view':>4} {'blob peak px':>16} {'ego-only px':>16} {'compensated px':>16}")
    for t in range(scene.num_frames):
        m_t = temporal_transform(scene.poses[0], scene.poses[t])
        for cam, grid in zip(scene.rig, render_features(scene, t)):
            ego_only = m_t.apply(pos)
            comp = compensate_and_warp(pos, vel, t, scene.tau, m_t)
            uv = [project_points(cam, p[None])[0][0] for p in (ego_only, comp)]
            _, _, visible = project_points(cam, comp[None])
            if not (visible[0] and 0 <= uv[1][0] < scene.width and 0 <= uv[1][1] < scene.height):
                continue
            peak = blob_peak(grid, track.signature_channel)
            print(f"{t:>2} {cam.view_id:>4} {np.array2string(peak, precision=1):>16}"
                  f" {np.array2string(uv[0], precision=1):>16} {np.array2string(uv[1], precision=1):>16}")
            break

    frames = np.eye(4)[:, None, :]  # frame t carries a one-hot marker in channel t
    identity_encoder = [(LinearMap("enc", np.hstack([np.eye(4), np.eye(4)])), "none")]  # enc(a, b) = a + b
    for lam in (0.3, 0.6, 0.9):
        print(f"lambda={lam}: frame weights {np.round(temporal_fuse(frames, lam, identity_encoder)[0], 4)}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
