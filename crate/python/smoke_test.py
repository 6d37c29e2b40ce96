"""Smoke test for the asd_py extension.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/asd_py-*.whl
then run:
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import asd_py


def check_scoring():
    e = [3.0, 1.0, 2.0]
    assert abs(asd_py.score_gwrp(e, 0.5) - 4.25 / 1.75) < 1e-12
    assert asd_py.score_gwrp(e, 0.0) == asd_py.score_max(e) == 3.0
    assert asd_py.score_gwrp(e, 1.0) == asd_py.score_mean(e) == 2.0
    assert asd_py.score_weighted(2.0, 1.0, 0.25) == 1.75
    assert asd_py.auc([0.1, 0.2], [0.3, 0.4]) == 1.0
    assert asd_py.pauc([0.1, 0.2], [0.3, 0.4], 0.1) == 1.0
    assert asd_py.mauc([("a", [0.1], [0.2]), ("b", [0.5], [0.2])]) == 0.0
    try:
        asd_py.score_gwrp([], 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("empty sequence accepted")


def check_features():
    clip = asd_py.synth_clip(0, seed=1, overrides={"duration_s": 2})
    assert len(clip) == 32000
    logmel, phase = asd_py.featurize(clip)
    assert len(logmel) == len(phase) == 1 + (32000 - 1024) // 512
    assert len(logmel[0]) == 128 and len(phase[0]) == 513
    assert all(math.isfinite(v) for row in logmel for v in row)


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        corpus, model_dir = root / "corpus", root / "model"
        small = {
            "num_ids": 2,
            "train_clips_per_id": 2,
            "test_normal_per_id": 1,
            "test_anomaly_per_id": 1,
            "duration_s": 1,
        }
        assert asd_py.synth(str(corpus), small) == 8
        assert asd_py.featurize_corpus(str(corpus)) == (8, 0)
        log = asd_py.train(str(corpus), str(model_dir), overrides={"epochs": 10})
        assert [e[1] for e in log].count("joint") == 1 and log[-1][3] is not None
        accuracy = asd_py.score(str(model_dir), str(corpus), str(root / "scores.csv"))
        assert 0.0 <= accuracy <= 1.0
        rows = asd_py.evaluate(str(root / "scores.csv"), str(root / "report"))
        assert {r[2] for r in rows if r[1] == "ALL"} == {"AUC", "pAUC", "mAUC"}

        model = asd_py.Model.load(str(model_dir))
        assert model.machine_type == "synth" and model.ids == ["id_00", "id_01"]
        wav = next((corpus / "synth" / "test").glob("anomaly_id_01_*.wav"))
        samples = asd_py.read_wav(str(wav))
        errors = model.errors(samples)
        assert len(errors) == 1 + (16000 - 1024) // 512 - 4
        probs = model.id_probabilities(samples)
        assert abs(sum(probs) - 1.0) < 1e-9
        s = model.score(samples, "id_01", r=0.9, beta=0.0)
        assert abs(s - asd_py.score_gwrp(errors, 0.9)) < 1e-12


if __name__ == "__main__":
    check_scoring()
    check_features()
    check_pipeline()
    print("asd_py smoke test passed")
