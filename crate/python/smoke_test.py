"""Smoke test for the selfvalnet extension module.

Build and install with `pip install --no-build-isolation ./crates/py`
(needs maturin), then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import selfvalnet as svn


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    assert len(svn.generate_anchors("ssd300")) == 8732
    anchors = svn.generate_anchors()
    assert len(anchors) == 380

    gt = svn.BBox.from_corners(0.1, 0.2, 0.5, 0.6)
    a = anchors[100]
    back = svn.decode_offsets(svn.encode_offsets(gt, a), a)
    assert all(close(x, y, 1e-9) for x, y in zip(back.corners(), gt.corners()))
    assert close(svn.iou(gt, gt), 1.0)

    r = svn.rescale([3.0, -1.0, 1.0])
    assert r == [1.0, -1.0, 0.0], r
    assert svn.rescale([2.0, 2.0]) == [0.0, 0.0]

    out = svn.self_validate(
        offsets=[[0.0] * 4] * 3,
        c_box=[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
        c_global=[2.0, 0.0],
        attention=[0.1, 0.5, 0.2],
        mode="full-hard",
    )
    # R(A) = [-1, 1, -0.5], cosine = [1, 0, 1]
    assert out["m"] == 1, out
    assert all(close(x, y) for x, y in zip(out["a_prime"], [0.0, 1.0, 0.5]))
    assert all(close(x, 0.0) for x in out["c_global_prime"])
    assert close(sum(out["a_tilde"]), 1.0)
    assert set(svn.VALIDATION_MODES) >= {"full-soft", "full-hard", "half", "none"}

    clip = svn.synth_clip(7)
    assert clip.frames_shape == [7, 64, 64, 3]
    assert len(clip.frames()) == math.prod(clip.frames_shape)
    assert len(clip) == 7
    target = clip.target(3)
    assert target in clip.objects(3)

    model = svn.Model(classes=5, seed=1)
    det = model.detect(clip)
    assert 0 <= det["class_id"] < 5
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.svnw")
        model.save(path)
        again = svn.Model.load(path).detect(clip)
        assert again["class_id"] == det["class_id"] and close(again["score"], det["score"], 0.0)
        try:
            svn.Model.load(os.path.join(d, "missing.svnw"))
        except OSError:
            pass
        else:
            raise AssertionError("loading a missing file should fail")

    box = svn.BBox.from_corners(0.0, 0.0, 1.0, 1.0)
    half = svn.BBox.from_corners(0.0, 0.0, 0.6, 1.0)
    rep = svn.mean_accuracy([(half, 1, box, 1)])
    assert close(rep["m_acc"], 0.3), rep

    boxes = [svn.BBox.from_corners(0.0, 0.0, 0.4, 0.4), svn.BBox.from_corners(0.2, 0.2, 0.6, 0.6)]
    assert svn.gaze_hit_score((0.3, 0.3), boxes, 0) == 0.5

    _, curve = svn.train(train_count=16, test_count=8, epochs=1)
    assert len(curve) == 1 and 0.0 <= curve[0] <= 1.0

    ok, table = svn.gradcheck(points=2)
    assert ok, table
    print("smoke test passed")


if __name__ == "__main__":
    main()
