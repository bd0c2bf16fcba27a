"""
Tests for the main orchestrator module.
"""

import argparse
import json
import sys
from pathlib import Path
from unittest.mock import Mock

import numpy as np
import pytest

# Add parent directory to path to import main
sys.path.insert(0, str(Path(__file__).parent.parent))

import main
from src.exporter import read_obj, read_table
from src.geometry import circle_contour, save_contour
from src.imaging import GradientProfile
from src.tracking import AmbiguousTopology, SequenceEntry, TrackedSequence, save_tracks
from src.training import NonFiniteLoss


@pytest.fixture
def log_args(tmp_path):
    return ['--log-dir', str(tmp_path / 'logs')]


@pytest.fixture
def drop_inputs(tmp_path):
    """Contour and gradient files for a round drop."""
    contour = save_contour(circle_contour((0.5, 0.5), 0.2), tmp_path / 'drop.txt')
    gradient = tmp_path / 'gradient.txt'
    np.savetxt(gradient, np.ones(52))
    return contour, gradient


class TestArgumentParsing:
    """Test command-line parsing."""

    def test_train_defaults(self):
        args = main.parse_arguments(['train', '--net', 'contour', '--dataset', 'd.jsonl', '--out', 'm.json'])
        assert args.epochs == 1000
        assert args.batch == 128
        assert args.lr == 1e-2
        assert args.decay == 1e-6
        assert args.optimizer == 'sgd_nesterov'

    def test_prep_needs_one_source(self):
        with pytest.raises(SystemExit) as exc:
            main.parse_arguments(['prep', '--frames', 'a', '--manifest', 'b', '--out', 'x'])
        assert exc.value.code == 2

    def test_command_required(self):
        with pytest.raises(SystemExit) as exc:
            main.parse_arguments([])
        assert exc.value.code == 2

    def test_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main.parse_arguments(['--help'])
        assert exc.value.code == 0
        assert 'simulate' in capsys.readouterr().out

    def test_unknown_network(self):
        with pytest.raises(SystemExit):
            main.parse_arguments(['train', '--net', 'fluid', '--dataset', 'd', '--out', 'm'])


class TestConfigurationLoading:
    """Test configuration loading functionality."""

    def namespace(self, **values):
        base = dict(log_level=None, log_dir=None, seed=None, K=None)
        base.update(values)
        return argparse.Namespace(**base)

    def test_cli_overrides_environment(self, monkeypatch):
        monkeypatch.setenv('RIVULET_HISTORY_LENGTH', '4')
        monkeypatch.setenv('RIVULET_SEED', '9')
        config = main.load_configuration(self.namespace(K=7, log_level='DEBUG'))
        assert config.history_length == 7
        assert config.seed == 9
        assert config.log_level == 'DEBUG'

    def test_validation_error(self):
        with pytest.raises(ValueError, match="History length"):
            main.load_configuration(self.namespace(K=0))


class TestExitCodes:
    """Test the exit code of each failure class."""

    def test_config_error(self, tmp_path, log_args, capsys):
        code = main.main(['prep', '--frames', str(tmp_path), '--out', str(tmp_path / 'd.jsonl'),
                          '--K', '0'] + log_args)
        assert code == main.EXIT_CONFIG
        assert 'Configuration Error' in capsys.readouterr().err

    def test_missing_frame_directory(self, tmp_path, log_args):
        code = main.main(['prep', '--frames', str(tmp_path / 'absent'), '--out', str(tmp_path / 'd.jsonl')]
                         + log_args)
        assert code == main.EXIT_CONFIG

    def test_ambiguous_topology_reports_frame(self, tmp_path, log_args, mocker, capsys):
        mocker.patch('main.load_frames', return_value=[])
        mocker.patch('main.extract_sequences', side_effect=AmbiguousTopology("three drops overlap", frame_index=7))
        code = main.main(['prep', '--frames', str(tmp_path), '--out', str(tmp_path / 'd.jsonl')] + log_args)
        assert code == main.EXIT_DATA
        assert 'frame 7' in capsys.readouterr().err

    def test_training_divergence(self, tmp_path, log_args, mocker):
        dataset = Mock(K=2, gradient_scale=1.0)
        dataset.gradient_arrays.return_value = (np.zeros((4, 2, 52)), np.zeros((4, 52)))
        mocker.patch('main.load_dataset', return_value=dataset)
        mocker.patch('main.train', side_effect=NonFiniteLoss(3, 0, float("nan")))
        code = main.main(['train', '--net', 'gradient', '--dataset', 'd.jsonl', '--hidden', '4',
                          '--out', str(tmp_path / 'g.json')] + log_args)
        assert code == main.EXIT_TRAINING
        assert not (tmp_path / 'g.json').exists()

    def test_breakage_without_positives(self, tmp_path, log_args, mocker):
        dataset = Mock(K=2, gradient_scale=1.0)
        dataset.breakage_arrays.return_value = (np.random.default_rng(0).normal(size=(6, 104)), np.zeros(6))
        mocker.patch('main.load_dataset', return_value=dataset)
        code = main.main(['train', '--net', 'breakage', '--dataset', 'd.jsonl', '--hidden', '4',
                          '--out', str(tmp_path / 'b.json')] + log_args)
        assert code == main.EXIT_DATA

    def test_missing_dataset(self, tmp_path, log_args):
        code = main.main(['train', '--net', 'contour', '--dataset', str(tmp_path / 'absent.jsonl'),
                          '--out', str(tmp_path / 'c.json')] + log_args)
        assert code == main.EXIT_CONFIG

    def test_invalid_scene(self, tmp_path, log_args):
        scene = tmp_path / 'scene.json'
        scene.write_text(json.dumps({'terrain': {'incline': 30.0}, 'wind': 3}))
        assert main.main(['simulate', '--scene', str(scene)] + log_args) == main.EXIT_SCENE

    def test_missing_scene(self, tmp_path, log_args):
        assert main.main(['simulate', '--scene', str(tmp_path / 'absent.json')] + log_args) == main.EXIT_CONFIG

    def test_keyboard_interrupt(self, tmp_path, log_args, mocker):
        mocker.patch.dict(main.COMMANDS, {'simulate': Mock(side_effect=KeyboardInterrupt)})
        assert main.main(['simulate', '--scene', 'x.json'] + log_args) == 130


class TestReconstructCommand:
    """Test the single-drop reconstruction command end to end."""

    def test_writes_mesh_and_logs(self, tmp_path, log_args, drop_inputs, monkeypatch):
        monkeypatch.setenv('RIVULET_SOLVER', 'direct')
        contour, gradient = drop_inputs
        out = tmp_path / 'mesh' / 'drop.obj'
        code = main.main(['reconstruct', '--contour', str(contour), '--gradient', str(gradient),
                          '--volume', '0.01', '--out', str(out), '--dump-color', str(tmp_path / 'color.pgm')]
                         + log_args)
        assert code == main.EXIT_OK
        vertices, faces = read_obj(out)
        assert len(vertices) > 100
        assert len(faces) > 100
        assert vertices[:, 2].max() > 0
        assert (tmp_path / 'color.pgm').exists()
        assert (tmp_path / 'logs' / 'rivulet.log').exists()

    def test_missing_contour(self, tmp_path, log_args, drop_inputs):
        _, gradient = drop_inputs
        code = main.main(['reconstruct', '--contour', str(tmp_path / 'absent.txt'), '--gradient', str(gradient),
                          '--volume', '0.01', '--out', str(tmp_path / 'drop.obj')] + log_args)
        assert code == main.EXIT_CONFIG

    def test_wrong_gradient_count(self, tmp_path, log_args, drop_inputs):
        contour, gradient = drop_inputs
        np.savetxt(gradient, np.ones(10))
        code = main.main(['reconstruct', '--contour', str(contour), '--gradient', str(gradient),
                          '--volume', '0.01', '--out', str(tmp_path / 'drop.obj')] + log_args)
        assert code == main.EXIT_DATA


class TestEnvironmentDefaults:
    """Test that output and split settings from the environment reach the commands."""

    def write_scene(self, tmp_path, **values) -> Path:
        scene = tmp_path / 'demo.json'
        data = {'models': {'contour': 'c.json', 'gradient': 'g.json', 'breakage': 'b.json'}}
        data.update(values)
        scene.write_text(json.dumps(data))
        return scene

    def test_scene_defaults(self, tmp_path, monkeypatch):
        monkeypatch.setenv('RIVULET_SPLIT_DELTA', '-0.8')
        monkeypatch.setenv('RIVULET_MIN_SEPARATION', '8')
        monkeypatch.setenv('RIVULET_OUTPUT_DIR', str(tmp_path / 'out'))
        scene = self.write_scene(tmp_path)
        cfg = main.SceneConfig.from_file(scene, defaults=main.scene_defaults(main.Config.from_env(), str(scene)))
        assert cfg.split_delta == -0.8
        assert cfg.min_separation == 8
        assert cfg.output_dir == str(tmp_path / 'out' / 'demo')

    def test_scene_file_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv('RIVULET_SPLIT_DELTA', '-0.8')
        scene = self.write_scene(tmp_path, split_delta=-0.3, output_dir=str(tmp_path / 'mine'))
        cfg = main.SceneConfig.from_file(scene, defaults=main.scene_defaults(main.Config.from_env(), str(scene)))
        assert cfg.split_delta == -0.3
        assert cfg.output_dir == str(tmp_path / 'mine')

    def test_simulate_writes_under_output_dir(self, tmp_path, log_args, monkeypatch, mocker):
        monkeypatch.setenv('RIVULET_OUTPUT_DIR', str(tmp_path / 'out'))
        runner = mocker.patch('main.run_scene',
                              return_value={'drops': 0, 'splits': 0, 'merges': 0, 'failures': []})
        assert main.main(['simulate', '--scene', str(self.write_scene(tmp_path))] + log_args) == main.EXIT_OK
        assert runner.call_args[0][0].output_dir == str(tmp_path / 'out' / 'demo')

    def test_synth_default_output(self, tmp_path, log_args, monkeypatch, mocker):
        monkeypatch.setenv('RIVULET_OUTPUT_DIR', str(tmp_path / 'out'))
        generate = mocker.patch('main.synth_generate', return_value=[])
        assert main.main(['synth'] + log_args) == main.EXIT_OK
        assert generate.call_args[0][2] == str(tmp_path / 'out' / 'synth')


class TestEvalCommand:
    """Test that evaluation reports pooled split precision and recall."""

    def write_truth(self, path):
        profile = GradientProfile.uniform(1.0)
        sequences = []
        for seq_id, split_frame in ((0, 3), (1, 2)):
            base = circle_contour((0.3 + 0.4 * seq_id, 0.6), 0.1)
            entries = []
            for t in range(5):
                contour = base.translated(np.array([0.0, -0.01 * t]))
                entries.append(SequenceEntry(contour, profile, contour.centroid(), t))
            sequences.append(TrackedSequence(seq_id, entries, 'split', split_frame=split_frame))
        return save_tracks(sequences, path)

    def test_reports_precision_and_recall(self, tmp_path, log_args, mocker, scripted):
        """Drop 0 is flagged every step and drop 1 never, so pooled recall is one hit in two."""
        mocker.patch('main.NetworkPredictor.from_files', return_value=scripted(split_ids={0}))
        scene = tmp_path / 'scene.json'
        scene.write_text(json.dumps({'models': {'contour': 'c.json', 'gradient': 'g.json', 'breakage': 'b.json'},
                                     'K': 2}))
        truth = self.write_truth(tmp_path / 'tracks.json')
        out = tmp_path / 'eval.csv'

        code = main.main(['eval', '--scene', str(scene), '--truth', str(truth), '--out', str(out)] + log_args)

        assert code == main.EXIT_OK
        assert len(read_table(out)) == 8
        summary = json.loads((tmp_path / 'eval.summary.json').read_text())
        assert summary['true_splits'] == 1
        assert summary['false_splits'] == 3
        assert summary['missed_splits'] == 1
        assert summary['precision'] == pytest.approx(0.25)
        assert summary['recall'] == pytest.approx(0.5)
        log = (tmp_path / 'logs' / 'rivulet.log').read_text(encoding='utf-8')
        assert 'precision 0.250, recall 0.500' in log
