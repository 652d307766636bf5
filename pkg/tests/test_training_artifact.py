import math
import struct

import numpy as np
import pytest

from prestroid_kit.artifact import (
    ArtifactChecksumError,
    ArtifactError,
    ArtifactVersionError,
    dumps_model,
    load_model,
    loads_model,
    save_model,
)
from prestroid_kit.evaluation import split_workload
from prestroid_kit.otp import build_otp_tree, build_vocabularies
from prestroid_kit.plan_ir import PlanNode, QueryTrace, SynthConfig, generate_synthetic_workload
from prestroid_kit.predicate_embedding import build_corpus, finalize_embedding, train_word2vec
from prestroid_kit.sampler import SamplerConfig
from prestroid_kit.training import TrainConfig, TrainingDiverged, featurize, fit, train_model
from prestroid_kit.tree_cnn import ArchConfig, ModelParams

ARCH = ArchConfig(conv_channels=(8, 8, 8), dense_units=(4, 4))


def _setup(count=240, seed=3):
    wl = generate_synthetic_workload(SynthConfig(count=count), seed)
    sp = split_workload(wl, seed=0)
    trees = [build_otp_tree(t.root) for t in sp["train"]]
    emb = finalize_embedding(train_word2vec(build_corpus(sp["train"]), 8, seed=0), trees)
    return sp, emb, build_vocabularies(sp["train"])


def _train(cfg, sampler=SamplerConfig(15, 3, 5)):
    sp, emb, vocab = _setup()
    return train_model(sp, ARCH, cfg, emb, vocab, sampler)


@pytest.fixture(scope="module")
def trained():
    cfg = TrainConfig(learning_rate=3e-3, max_epochs=6, patience=3, seed=1)
    model, res = _train(cfg)
    return model, res, _setup()[0]


class TestTraining:
    def test_learns(self, trained):
        _, res, _ = trained
        assert min(h["val_loss"] for h in res.history) < res.history[0]["val_loss"]

    def test_deterministic(self, trained):
        model, res, _ = trained
        again, res2 = _train(TrainConfig(learning_rate=3e-3, max_epochs=6, patience=3, seed=1))
        assert res.history == res2.history
        assert model == again

    def test_seed_matters(self, trained):
        _, res, _ = trained
        _, other = _train(TrainConfig(learning_rate=3e-3, max_epochs=6, patience=3, seed=2))
        assert other.history != res.history

    def test_early_stopping_and_restore(self):
        sp, emb, vocab = _setup()
        cfg = TrainConfig(learning_rate=5e-2, max_epochs=40, patience=2, seed=0)
        model, res = train_model(sp, ARCH, cfg, emb, vocab, SamplerConfig(15, 3, 5))
        assert len(res.history) <= res.best_epoch + cfg.patience
        best = min(h["val_loss"] for h in res.history)
        assert res.history[res.best_epoch - 1]["val_loss"] == best
        # restored weights reproduce the best validation loss
        from prestroid_kit.training import evaluate_loss

        va = featurize(sp["val"], vocab, emb, model.sampler, model.transform)
        assert evaluate_loss(model.params, va.batch, cfg.huber_delta) == pytest.approx(best, rel=1e-6)

    def test_empty_split(self):
        sp, emb, vocab = _setup()
        sp = dict(sp, val=sp["val"].__class__())
        with pytest.raises(ValueError):
            train_model(sp, ARCH, TrainConfig(), emb, vocab, SamplerConfig())

    def test_divergence_is_reported(self):
        sp, emb, vocab = _setup(count=60)
        tr = featurize(sp["train"], vocab, emb, SamplerConfig(), _model_transform(sp))
        va = featurize(sp["val"], vocab, emb, SamplerConfig(), _model_transform(sp))
        p = ModelParams.init(ARCH, tr.batch.features.shape[3], 5, seed=0)
        p.weights["out.b"][:] = np.nan
        with pytest.raises(TrainingDiverged):
            fit(p, tr.batch, va.batch, TrainConfig(max_epochs=2))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_full_tree_mode_trains(self):
        _, res = _train(TrainConfig(max_epochs=2, seed=0), SamplerConfig(N=None, K=1))
        assert len(res.history) == 2 and all(math.isfinite(h["val_loss"]) for h in res.history)


def _model_transform(sp):
    from prestroid_kit.evaluation import fit_transform

    return fit_transform([t.total_cpu_min for t in sp["train"]])


class TestPredict:
    def test_range_and_repeatability(self, trained):
        model, _, sp = trained
        a = model.predict_many(sp["test"])
        assert np.all(a >= model.transform.min_minutes - 1e-9)
        assert np.all(a <= model.transform.max_minutes + 1e-9)
        np.testing.assert_array_equal(a, model.predict_many(sp["test"]))

    def test_single_matches_batch(self, trained):
        model, _, sp = trained
        t = sp["test"].traces[0]
        assert model.predict(t) == pytest.approx(model.predict_many([t])[0], rel=1e-6)

    def test_unseen_operator(self, trained):
        model, _, _ = trained
        bad = QueryTrace("x", PlanNode("Teleport", children=(PlanNode("TableScan", table="T"),)), 2.0)
        with pytest.raises(KeyError):
            model.predict(bad)


class TestArtifact:
    def test_round_trip(self, trained, tmp_path):
        model, _, sp = trained
        path = tmp_path / "m.bin"
        digest = save_model(model, path)
        back = load_model(path)
        assert back == model
        np.testing.assert_array_equal(back.predict_many(sp["test"]), model.predict_many(sp["test"]))
        assert save_model(back, tmp_path / "again.bin") == digest

    def test_truncated(self, trained):
        data = dumps_model(trained[0])
        with pytest.raises(ArtifactChecksumError):
            loads_model(data[:-10])
        with pytest.raises(ArtifactChecksumError):
            loads_model(data[:20])

    def test_bit_flip(self, trained):
        data = bytearray(dumps_model(trained[0]))
        data[-1] ^= 1
        with pytest.raises(ArtifactChecksumError):
            loads_model(bytes(data))

    def test_newer_major(self, trained):
        data = bytearray(dumps_model(trained[0]))
        data[8:10] = struct.pack("<H", 99)
        with pytest.raises(ArtifactVersionError):
            loads_model(bytes(data))

    def test_not_an_artifact(self):
        with pytest.raises(ArtifactError):
            loads_model(b"hello world, not a model")
