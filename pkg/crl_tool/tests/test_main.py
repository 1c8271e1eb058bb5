"""main.py のテスト

テスト対象:
  - build_parser: サブコマンドと共通フラグ
  - main: 終了コード（0 成功 / 1 設定エラー / 2 検証失敗）
"""

from __future__ import annotations

import json

import pytest

import core.counterexamples
from main import EXIT_ERROR, EXIT_OK, EXIT_VERIFY_FAILED, build_parser, main


def _write_config(tmp_path, data: dict) -> str:
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(data, ensure_ascii=False), encoding='utf-8')
    return str(path)


class TestParser:
    def test_replicate_defaults(self):
        args = build_parser().parse_args(['replicate', 'table2'])
        assert args.table == 'table2'
        assert args.scale == 'desk'
        assert args.xlsx is False

    def test_common_flags(self):
        args = build_parser().parse_args(
            ['train', '--config', 'c.json', '--seed', '4', '--out', 'o', '--threads', '2',
             '--data', 'd'])
        assert (args.config, args.seed, args.out, args.threads, args.data) == \
            ('c.json', 4, 'o', 2, 'd')

    def test_unknown_counterexample(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['verify-counterexamples', '--which', 'spiral'])


class TestMain:
    def test_verify_counterexamples(self, tmp_path, capsys):
        config = _write_config(tmp_path, {'counterexamples': {'n': 2000, 'permutations': 20}})
        code = main(['verify-counterexamples', '--which', 'shift', '--config', config,
                     '--out', str(tmp_path)])
        assert code == EXIT_OK
        result = json.loads(capsys.readouterr().out)
        assert result['passed']
        assert (tmp_path / 'verify_counterexamples.json').exists()

    def test_point_cap_from_config(self, tmp_path, monkeypatch):
        seen = {}

        def fake(which, seed, **kw):
            seen.update(kw)
            return {'which': which, 'passed': True}

        monkeypatch.setattr(core.counterexamples, 'certify', fake)
        config = _write_config(tmp_path, {'counterexamples': {'max_points': 321}})
        main(['verify-counterexamples', '--which', 'rotation', '--config', config,
              '--out', str(tmp_path)])
        assert seen['max_points'] == 321
        assert seen['n'] == 100000

    def test_failed_verification_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.setattr(core.counterexamples, 'certify',
                            lambda which, seed, **kw: {'which': which, 'passed': False})
        code = main(['verify-counterexamples', '--which', 'rotation', '--out', str(tmp_path)])
        assert code == EXIT_VERIFY_FAILED

    def test_verify_oracle(self, tmp_path):
        config = _write_config(tmp_path, {'oracle': {'n_families': 3, 'points': 50, 'max_d': 4}})
        assert main(['verify-oracle', '--config', config, '--out', str(tmp_path)]) == EXIT_OK

    def test_missing_config(self, tmp_path):
        assert main(['generate', '--config', str(tmp_path / 'none.json')]) == EXIT_ERROR

    def test_invalid_config(self, tmp_path):
        config = _write_config(tmp_path, {'experiment': {'runs': 0}})
        assert main(['generate', '--config', config, '--out', str(tmp_path)]) == EXIT_ERROR

    def test_generate(self, tmp_path):
        config = _write_config(tmp_path, {
            'experiment': {'d': 2, 'd_prime': 3, 'k': 1, 'n': 50, 'mixing': 'linear'},
        })
        out = tmp_path / 'data'
        assert main(['generate', '--config', config, '--seed', '2', '--out', str(out)]) == EXIT_OK
        assert (out / 'family.json').exists()
        assert (out / 'env0_obs.bin').exists()
