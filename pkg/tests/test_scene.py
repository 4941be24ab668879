import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from depthvid import scene as sc
from depthvid.tensor import Tensor


def _spec(objects, frames=3, size=12, bg=0):
    return sc.SceneSpec(frames, size, size, bg, 10.0, "test", objects)


def _circle(r, color, xy, depth):
    return sc.SceneObject("circle", (r,), color, list(xy), list(depth))


def brute_force(spec):
    """Per-pixel nearest-object evaluation, independent of the painter loop."""
    F, H, W = spec.frames, spec.height, spec.width
    rgb = np.zeros((F, 3, H, W))
    depth = np.zeros((F, 1, H, W))
    for f in range(F):
        for i in range(H):
            for j in range(W):
                best, colour = spec.background_depth, (spec.background,) * 3
                for obj in spec.objects:
                    cx, cy = obj.xy[f]
                    px, py = j + 0.5, i + 0.5
                    if obj.shape == "circle":
                        hit = (px - cx) ** 2 + (py - cy) ** 2 <= obj.size[0] ** 2
                    else:
                        hit = abs(px - cx) <= obj.size[0] / 2 and abs(py - cy) <= obj.size[1] / 2
                    if hit and obj.depth[f] < best:
                        best, colour = obj.depth[f], obj.color
                depth[f, 0, i, j] = best
                rgb[f, :, i, j] = np.array(colour) / 127.5 - 1
    return rgb, depth


def test_constant_trajectory_frames_identical():
    v = sc.render(_spec([_circle(3, (200, 10, 10), [(6, 6)] * 3, [4.0] * 3)]))
    assert all(np.array_equal(v.rgb.data[0], v.rgb.data[f]) for f in range(3))


def test_overlap_takes_nearer_object():
    objs = [_circle(4, (255, 0, 0), [(5, 6)], [5.0]), _circle(4, (0, 0, 255), [(7, 6)], [2.0])]
    v = sc.render(_spec(objs, frames=1))
    assert v.depth.data[0, 0, 5, 5] == 2.0
    np.testing.assert_allclose(v.rgb.data[0, :, 5, 5], [-1, -1, 1])


def test_crossing_fixture_matches_brute_force():
    spec = sc.load_fixture("two_circle_crossing")
    v = sc.render(spec)
    rgb, depth = brute_force(spec)
    np.testing.assert_allclose(v.rgb.data, rgb, atol=1e-6)
    np.testing.assert_allclose(v.depth.data, depth, rtol=1e-6)
    # both discs cover the centre pixel at frames 3 and 4, where the depth order flips
    red, blue = spec.objects
    assert red.depth[3] < blue.depth[3] and red.depth[4] > blue.depth[4]
    assert v.rgb.data[3, 0, 16, 16] == pytest.approx(red.color[0] / 127.5 - 1)
    assert v.rgb.data[4, 0, 16, 16] == pytest.approx(blue.color[0] / 127.5 - 1)


@given(st.integers(0, 10_000))
def test_random_scenes_match_brute_force(seed):
    spec = sc.random_scene(seed, frames=2, size=12, max_objects=3)
    v = sc.render(spec)
    rgb, depth = brute_force(spec)
    np.testing.assert_allclose(v.depth.data, depth, rtol=1e-6)
    np.testing.assert_allclose(v.rgb.data, rgb, atol=1e-6)


def test_depth_to_latent_rules():
    np.testing.assert_array_equal(sc.depth_to_latent(np.full((2, 1, 8, 8), 3.0)).data, 0.0)
    d = np.full((1, 1, 4, 4), 8.0)
    d[..., :2] = 2.0  # left half near
    out = sc.depth_to_latent(d, factor=2).data
    np.testing.assert_allclose(out[0, 0], [[1.0, -1.0], [1.0, -1.0]])
    d[0, 0, 0, 2] = 2.0  # one near pixel in the top-right block
    assert sc.depth_to_latent(d, factor=2).data[0, 0, 0, 1] == pytest.approx(-0.5)
    with pytest.raises(sc.SceneError):
        sc.depth_to_latent(np.zeros((1, 1, 4, 4)))


def test_sample_frames_indices():
    assert sc.frame_indices(24, 8) == [0, 3, 7, 10, 13, 16, 20, 23]
    assert sc.frame_indices(5, 5) == [0, 1, 2, 3, 4]
    assert sc.frame_indices(9, 1) == [0]
    with pytest.raises(sc.SceneError):
        sc.frame_indices(4, 5)


def test_prompt_embedding_rows():
    a, b = sc.embed_prompt("red circle").data, sc.embed_prompt("blue circle").data
    assert a.shape == (8, 32)
    assert [not np.array_equal(a[i], b[i]) for i in range(8)] == [True] + [False] * 7
    assert a.tobytes() == sc.embed_prompt("Red  Circle").data.tobytes()
    null = sc.token_vector(sc.NULL_TOKEN)
    assert all(np.array_equal(r, null) for r in sc.embed_prompt("").data)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, rtol=1e-6)
    assert sc.token_seed("red") == 11765665226422741261


def test_scene_text_round_trip():
    spec = sc.load_fixture("occlusion_chain")
    again = sc.parse_scene(sc.format_scene(spec))
    assert again == spec


@pytest.mark.parametrize(
    "text",
    [
        "circle 3 1 2 3\n",
        "scene 2 8 8 0\ncircle 3 1 2 3\nxy 1 1\ndepth 1 1\n",
        "scene 1 8 8 0\ncircle 3 1 2 3\nxy 1 1\ndepth -1\n",
        "scene 1 8 8 0\nblob 3\n",
    ],
)
def test_scene_parse_errors(text):
    with pytest.raises(sc.SceneError):
        sc.render(sc.parse_scene(text))


def test_all_fixtures_render():
    prompts = set()
    for name in sc.FIXTURE_NAMES:
        v = sc.render(sc.load_fixture(name))
        assert v.rgb.shape == (8, 3, 32, 32)
        prompts.add(v.prompt)
    assert len(prompts) == len(sc.FIXTURE_NAMES)


@given(hnp.arrays(np.uint8, st.tuples(st.just(3), st.integers(1, 6), st.integers(1, 6))))
def test_ppm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("ppm") / "a.ppm"
    rgb = (img / 127.5 - 1).astype(np.float32)
    sc.write_ppm(path, rgb)
    np.testing.assert_array_equal(sc.read_ppm(path), rgb)


@given(hnp.arrays(np.uint16, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_pgm16_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pgm") / "a.pgm"
    sc.write_pgm16(path, img)
    np.testing.assert_array_equal(sc.read_pgm16(path), img)


def test_save_load_video(tmp_path):
    v = sc.render(sc.load_fixture("approach_recede"))
    sc.save_video(v, tmp_path, contact_sheet=True)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "frame_0007.ppm" in names and "depth_0007.pgm" in names and "contact_sheet.ppm" in names
    back = sc.load_video(tmp_path)
    np.testing.assert_array_equal(back.rgb.data, v.rgb.data)
    span = float(v.depth.data.max() - v.depth.data.min())
    np.testing.assert_allclose(back.depth.data, v.depth.data, atol=span / 65535)
    assert back.prompt == v.prompt
    with pytest.raises(FileNotFoundError):
        sc.load_video(tmp_path / "missing")
