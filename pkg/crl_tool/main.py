"""対照学習による因果表現学習ツール: エントリーポイント

終了コード: 0 成功 / 1 設定・入力エラー / 2 verify-* の検証失敗
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERIFY_FAILED = 2

_THREAD_ENV = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='crl-tool', description='介入データからの因果表現学習')
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p: argparse.ArgumentParser, *, out: bool = True) -> None:
        p.add_argument('--config', default=None, help='設定 JSON（省略時はリポジトリ直下の config.json）')
        p.add_argument('--seed', type=int, default=None, help='experiment.seed を上書き')
        p.add_argument('--threads', type=int, default=None, help='並列実行するシード数')
        if out:
            p.add_argument('--out', default=None, help='出力ディレクトリ')

    p = sub.add_parser('generate', help='ファミリーと環境ごとのデータを生成')
    common(p)

    p = sub.add_parser('train', help='データディレクトリから学習')
    common(p)
    p.add_argument('--data', required=True)

    p = sub.add_parser('eval', help='チェックポイントを評価')
    common(p)
    p.add_argument('--data', required=True)
    p.add_argument('--model', required=True)

    p = sub.add_parser('replicate', help='結果表を再現')
    common(p)
    p.add_argument('table', choices=['table1', 'table2', 'table3'])
    p.add_argument('--scale', choices=['full', 'desk'], default='desk')
    p.add_argument('--xlsx', action='store_true', help='Excel ファイルも書き出す')

    p = sub.add_parser('sweep-shift', help='シフト量 η を掃引')
    common(p)
    p.add_argument('--etas', default=None, help='カンマ区切りの η（省略時は sweep.etas）')
    p.add_argument('--xlsx', action='store_true')

    p = sub.add_parser('verify-oracle', help='解析的オラクルの恒等式を検証')
    common(p)

    p = sub.add_parser('verify-counterexamples', help='識別不能性の反例を検証')
    common(p)
    p.add_argument('--which', default='all',
                   choices=['all', 'rotation', 'pair-flow', 'do-flow', 'shift', 'uniform'])
    return parser


def _load(args: argparse.Namespace):
    from core.config import experiment_config_from_dict, load_config

    config = load_config(args.config)
    if args.seed is not None:
        config['experiment']['seed'] = args.seed
    if args.out is not None:
        config['experiment']['output_dir'] = args.out
    return config, experiment_config_from_dict(config)


def _print_json(data: dict) -> None:
    print(json.dumps(data, ensure_ascii=False, indent=2, default=str))


def run(args: argparse.Namespace) -> int:
    from core import harness
    from core.counterexamples import WHICH, certify
    from core.exporter import export_json
    from core.oracle import verify_identities

    config, cfg = _load(args)
    out = cfg.output_dir
    threads = args.threads if args.threads is not None else int(config.get('threads', 1))

    if args.command == 'generate':
        harness.generate_to_dir(cfg, out)
    elif args.command == 'train':
        harness.train_from_dir(cfg, args.data, out)
    elif args.command == 'eval':
        report = harness.eval_from_dir(cfg, args.data, args.model, out)
        _print_json({'mcc': report.mcc, 'shd': report.shd, 'auroc': report.auroc, 'r2': report.r2})
    elif args.command == 'replicate':
        table = harness.replicate(args.table, args.scale, base_config=config, seed=args.seed,
                                  out_dir=out, threads=threads, xlsx=args.xlsx)
        print(table[['Setting', 'Method', 'SHD', 'AUROC', 'MCC', 'R²']].to_string(index=False))
    elif args.command == 'sweep-shift':
        etas = ([float(v) for v in args.etas.split(',')] if args.etas
                else [float(v) for v in config['sweep']['etas']])
        table = harness.sweep_shift(cfg, etas, out_dir=out, threads=threads, xlsx=args.xlsx)
        print(table[['eta', 'SHD', 'AUROC', 'MCC', 'R²']].to_string(index=False))
    elif args.command == 'verify-oracle':
        opts = config['oracle']
        report = verify_identities(int(opts['n_families']), int(opts['points']),
                                   cfg.seed, int(opts['max_d']))
        export_json(report, os.path.join(out, 'verify_oracle.json'))
        _print_json(report)
        return EXIT_OK if report['passed'] else EXIT_VERIFY_FAILED
    elif args.command == 'verify-counterexamples':
        opts = config['counterexamples']
        names = WHICH if args.which == 'all' else (args.which,)
        reports = [certify(name, cfg.seed, n=int(opts['n']), permutations=int(opts['permutations']),
                           max_points=int(opts['max_points']))
                   for name in names]
        result = {'reports': reports, 'passed': all(r['passed'] for r in reports)}
        export_json(result, os.path.join(out, 'verify_counterexamples.json'))
        _print_json(result)
        return EXIT_OK if result['passed'] else EXIT_VERIFY_FAILED
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    # BLAS のスレッド数を固定（numpy の読み込み前に設定する）
    for name in _THREAD_ENV:
        os.environ.setdefault(name, '1')

    from core.checkpoint import CheckpointError
    from core.config import ConfigError
    from core.dataset_io import DatasetFormatError

    try:
        return run(args)
    except (ConfigError, DatasetFormatError, CheckpointError, FileNotFoundError) as e:
        logging.error('%s', e)
        return EXIT_ERROR
    except Exception:
        logging.exception('処理に失敗しました')
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
