import dataclasses
import json

import numpy as np
import pytest

from lightcap.cli import main
from lightcap.config import (
    RunConfig,
    load_run_config,
    run_config_from_dict,
    save_run_config,
)
from lightcap.data import build_synthetic_corpus
from lightcap.model import desk_config
from lightcap.run import distill, train


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    directory = tmp_path_factory.mktemp("corpus")
    dataset, vocab = build_synthetic_corpus(directory, n_items=4, seed=3,
                                            n_scene_types=4)
    return {"dir": directory, "dataset": dataset, "vocab": vocab}


def quick_config(corpus, tmp_path, **kw):
    base = dict(
        model=desk_config(),
        dataset=corpus["dataset"],
        vocab=corpus["vocab"],
        checkpoint_out=str(tmp_path / "model.lcap"),
        log_out=str(tmp_path / "log.jsonl"),
        steps=2,
        batch_size=2,
        log_every=1,
        lr=1e-3,
        seed=7,
    )
    base.update(kw)
    return RunConfig(**base)


class TestConfig:
    def test_defaults_mirror_production_recipe(self):
        cfg = RunConfig()
        assert cfg.mask_rate == 0.15
        assert cfg.pollution_prob == 0.5
        assert cfg.tau == 1.0
        assert cfg.top_k_concepts == 20
        assert cfg.model.n_branches == 3
        assert cfg.beam_size == 5
        assert cfg.max_len == 20
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)
        assert cfg.weight_decay == 1e-2

    def test_roundtrip(self, tmp_path):
        cfg = RunConfig(steps=17, lr=3e-4, teachers=("a.lcap", "b.lcap"))
        path = tmp_path / "run.json"
        save_run_config(path, cfg)
        back = load_run_config(path)
        assert back == cfg

    def test_production_preset(self):
        cfg = run_config_from_dict({"preset": "production", "steps": 1})
        assert cfg.model.fusion.hidden == 312
        assert cfg.model.fusion.vocab_size == 30522

    def test_unknown_key_rejected(self):
        from lightcap.errors import ConfigError

        with pytest.raises(ConfigError):
            run_config_from_dict({"warp_speed": 9})


class TestTrainCommands:
    def test_pretrain_runs_and_logs(self, corpus, tmp_path):
        config = quick_config(corpus, tmp_path)
        model, logs = train(config, "pretrain")
        assert (tmp_path / "model.lcap").exists()
        lines = (tmp_path / "log.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["stage"] == "pretrain"
        assert model.step == 2

    def test_finetune_runs(self, corpus, tmp_path):
        config = quick_config(corpus, tmp_path)
        _, logs = train(config, "finetune")
        assert all(np.isfinite(entry["loss"]) for entry in logs)

    def test_determinism_bitwise(self, corpus, tmp_path):
        a_dir = tmp_path / "a"
        b_dir = tmp_path / "b"
        a_dir.mkdir()
        b_dir.mkdir()
        for d in (a_dir, b_dir):
            train(quick_config(corpus, d), "pretrain")
        assert (a_dir / "log.jsonl").read_bytes() == (b_dir / "log.jsonl").read_bytes()
        assert (a_dir / "model.lcap").read_bytes() == (b_dir / "model.lcap").read_bytes()

    def test_distill_needs_teacher(self, corpus, tmp_path):
        config_path = tmp_path / "cfg.json"
        save_run_config(config_path, quick_config(corpus, tmp_path))
        with pytest.raises(SystemExit) as exc:
            main(["distill", "--config", str(config_path)])
        assert exc.value.code == 2

    def test_distill_runs_against_trained_teacher(self, corpus, tmp_path):
        teacher_cfg = quick_config(corpus, tmp_path, steps=3)
        train(teacher_cfg, "finetune")
        student_cfg = quick_config(
            corpus, tmp_path,
            teachers=(str(tmp_path / "model.lcap"),),
            checkpoint_out=str(tmp_path / "student.lcap"),
            log_out=str(tmp_path / "student_log.jsonl"),
            kd_stage="finetune",
            kd_phase_split=None,
        )
        student, logs = distill(student_cfg)
        assert (tmp_path / "student.lcap").exists()
        assert "trunk_kd" in logs[-1]

    def test_missing_dataset_is_usage_error(self, corpus, tmp_path):
        config = dataclasses.replace(quick_config(corpus, tmp_path), dataset=None)
        from lightcap.errors import UsageError

        with pytest.raises(UsageError):
            train(config, "pretrain")

    def test_vocab_size_mismatch_detected(self, corpus, tmp_path):
        bad_model = desk_config(vocab_size=123)
        config = quick_config(corpus, tmp_path, model=bad_model)
        from lightcap.errors import UsageError

        with pytest.raises(UsageError, match="vocab"):
            train(config, "pretrain")


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    config = RunConfig(
        model=desk_config(),
        dataset=corpus["dataset"],
        vocab=corpus["vocab"],
        checkpoint_out=str(tmp / "model.lcap"),
        steps=6,
        batch_size=4,
        log_every=5,
        lr=2e-3,
        seed=1,
    )
    train(config, "finetune")
    return {"checkpoint": str(tmp / "model.lcap"), **corpus}


class TestCaptionCommand:
    def feature_file(self, corpus):
        return str(corpus["dir"] / "features_0000.lten")

    def test_caption_prints_text(self, trained, capsys):
        code = main([
            "caption",
            "--features", self.feature_file(trained),
            "--checkpoint", trained["checkpoint"],
            "--vocab", trained["vocab"],
            "--concepts", "dog,park",
            "--beam", "2",
            "--max-len", "5",
        ])
        assert code == 0
        out = capsys.readouterr().out.strip()
        assert len(out.split()) <= 5

    def test_beam_one_equals_greedy_flag(self, trained, capsys):
        args = [
            "caption",
            "--features", self.feature_file(trained),
            "--checkpoint", trained["checkpoint"],
            "--vocab", trained["vocab"],
            "--concepts", "dog,park",
            "--max-len", "6",
        ]
        assert main(args + ["--beam", "1"]) == 0
        beam1 = capsys.readouterr().out
        assert main(args + ["--greedy"]) == 0
        greedy = capsys.readouterr().out
        assert beam1 == greedy

    def test_max_len_one_gives_at_most_one_word(self, trained, capsys):
        code = main([
            "caption",
            "--features", self.feature_file(trained),
            "--checkpoint", trained["checkpoint"],
            "--vocab", trained["vocab"],
            "--concepts", "dog",
            "--max-len", "1",
        ])
        assert code == 0
        assert len(capsys.readouterr().out.split()) <= 1

    def test_missing_feature_file(self, trained, capsys):
        code = main([
            "caption",
            "--features", "/nonexistent/grid.lten",
            "--checkpoint", trained["checkpoint"],
            "--vocab", trained["vocab"],
        ])
        assert code == 1


class TestEvaluateCommand:
    def test_self_match_corpus(self, tmp_path, capsys):
        path = tmp_path / "preds.jsonl"
        rows = [
            {"id": "a", "candidate": "a dog sits on the mat",
             "references": ["a dog sits on the mat"]},
            {"id": "b", "candidate": "two birds fly over blue water",
             "references": ["two birds fly over blue water"]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        assert main(["evaluate", "--pred", str(path)]) == 0
        scores = json.loads(capsys.readouterr().out)
        assert scores["bleu4"] == pytest.approx(1.0)
        assert scores["cider"] == pytest.approx(10.0, abs=1e-6)

    def test_disjoint_corpus(self, tmp_path, capsys):
        path = tmp_path / "preds.jsonl"
        rows = [
            {"id": "a", "candidate": "purple elephants dance tonight",
             "references": ["a dog sits on the mat"]},
            {"id": "b", "candidate": "quantum flux melts rapidly",
             "references": ["two birds fly over blue water"]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        assert main(["evaluate", "--pred", str(path)]) == 0
        scores = json.loads(capsys.readouterr().out)
        assert scores["bleu4"] == 0.0
        assert scores["cider"] == 0.0

    def test_split_pred_and_refs_files(self, tmp_path, capsys):
        preds = tmp_path / "p.jsonl"
        refs = tmp_path / "r.jsonl"
        preds.write_text(json.dumps({"id": "a", "caption": "a dog sits here"}) + "\n")
        refs.write_text(
            json.dumps({"id": "a", "references": ["a dog sits here"]}) + "\n"
        )
        # single image: CIDEr needs >= 2 images, so this is a usage error
        assert main(["evaluate", "--pred", str(preds), "--refs", str(refs)]) == 2

    def test_golden_corpus_values(self, tmp_path, capsys):
        """Precomputed oracle values for a small mixed corpus."""
        rows = [
            {"id": "a", "candidate": "a dog sits on the mat",
             "references": ["a dog sits on the mat"]},
            {"id": "b", "candidate": "two birds fly over the water",
             "references": ["two birds fly over blue water today"]},
        ]
        path = tmp_path / "preds.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        assert main(["evaluate", "--pred", str(path)]) == 0
        scores = json.loads(capsys.readouterr().out)
        # frozen outputs of a standalone step-by-step oracle for this corpus:
        # clipped matches 11/12, 8/10, 6/8, 4/6; brevity exp(1 - 13/12);
        # image CIDEr terms 10.0 and 5.0669547...
        assert scores["bleu4"] == pytest.approx(0.71594004, abs=1e-6)
        assert scores["cider"] == pytest.approx(7.53347737, abs=1e-6)


class TestProfileCommand:
    def test_table_output(self, capsys):
        assert main(["profile", "--preset", "production"]) == 0
        out = capsys.readouterr().out
        assert "fusion" in out
        assert "1 MAC = 2 FLOPs" in out

    def test_thread_cap_and_log_env(self, capsys, monkeypatch):
        monkeypatch.setenv("LIGHTCAP_LOG", "info")
        assert main(["profile", "--threads", "1", "--preset", "desk",
                     "--no-backbones"]) == 0
        assert "modulator" in capsys.readouterr().out

    def test_json_output(self, capsys):
        assert main(["profile", "--preset", "desk", "--json", "--no-backbones"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["totals"]["params"] > 0


class TestRetrieveCommand:
    def test_retrieve_concepts_end_to_end(self, tmp_path, capsys):
        from lightcap.cli import save_alignment
        from lightcap.concepts import AlignmentMLP, ConceptVocabulary, save_concept_vocabulary
        from lightcap.tensor import Tensor
        from lightcap.vision import GridFeature, save_grid_features

        rng = np.random.default_rng(0)
        emb = rng.normal(size=(6, 8))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        vocab = ConceptVocabulary(names=[f"thing{i}" for i in range(6)], embeddings=emb)
        save_concept_vocabulary(tmp_path / "names.txt", tmp_path / "emb.lten", vocab)
        mlp = AlignmentMLP(in_dim=5, hidden=6, out_dim=8, seed=1)
        save_alignment(str(tmp_path / "align"), mlp)
        grid = GridFeature(Tensor(rng.normal(size=(4, 4, 5))))
        save_grid_features(tmp_path / "grid.lten", grid)
        code = main([
            "retrieve-concepts",
            "--features", str(tmp_path / "grid.lten"),
            "--concept-vocab-names", str(tmp_path / "names.txt"),
            "--concept-vocab-emb", str(tmp_path / "emb.lten"),
            "--alignment", str(tmp_path / "align"),
            "--top-k", "3",
        ])
        assert code == 0
        found = json.loads(capsys.readouterr().out)["concepts"]
        assert 1 <= len(found) <= 3
