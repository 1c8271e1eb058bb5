"""実験の実行・表の再現・ファイル入出力

1 シードの流れ: ファミリー生成 → 混合関数 → 環境ごとに n 個の観測 → 学習 → 評価。
シードごとの乱数ストリームは utils.rng の STREAM_* で分ける。
"""

from __future__ import annotations

import logging
import operator
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import pandas as pd

from core.checkpoint import load_checkpoint, save_checkpoint
from core.config import (
    ExperimentConfig,
    experiment_config_from_dict,
    overridden_fields,
    preset_configs,
)
from core.contrastive import (
    ContrastiveModel,
    embed,
    eta_zero_diagnostic,
    extract_graph,
    train,
)
from core.dataset_io import read_dataset, write_dataset
from core.exporter import export_csv, export_excel, export_json
from core.family_io import load_family, save_family
from core.metrics import MetricsReport, aggregate, evaluate_run
from core.mixing import (
    MixingFunction,
    make_mixing,
    sample_environment,
    sample_observations,
    save_preview,
)
from core.scm import ScmFamily, sample_family
from utils.provenance import provenance
from utils.rng import (
    STREAM_DATA,
    STREAM_EVAL,
    STREAM_FAMILY,
    STREAM_MIXING,
    STREAM_TRAIN,
    make_rng,
    rng_from_chain,
    seed_chain,
)

logger = logging.getLogger(__name__)

FAMILY_FILE = 'family.json'
CHECKPOINT_DIR = 'model'
CURVE_FILE = 'training_curve.csv'
REPORT_JSON = 'report.json'
REPORT_CSV = 'report.csv'

# 緩めた合格基準（平均値）。table3 は満たさなくても警告のみ。
# abs_wins_share: η = 0 の診断で corr(Ẑ, |Z|) が corr(Ẑ, Z) を上回った座標の割合
ACCEPTANCE: dict[str, list[tuple[str, str, str, str, float]]] = {
    'table1': [
        ("ER(5, 3/2), d'=10", 'Contrastive Linear', 'mcc', '>=', 0.85),
        ("ER(5, 3/2), d'=10", 'Contrastive Linear', 'r2', '>=', 0.98),
        ("ER(5, 3/2), d'=10", 'Contrastive', 'mcc', '<', 0.3),
        ("ER(5, 3/2), d'=10", 'Contrastive', 'abs_wins_share', '>', 0.5),
    ],
    'table2': [
        ("ER(5, 2), d'=20", 'Contrastive', 'mcc', '>=', 0.90),
        ("ER(5, 2), d'=20", 'Contrastive', 'auroc', '>=', 0.90),
        ("ER(5, 2), d'=20", 'Contrastive', 'r2', '>=', 0.90),
        ("ER(5, 2), d'=20", 'Contrastive', 'shd', '<=', 4.0),
        ("ER(10, 2), d'=100", 'Contrastive', 'mcc', '>=', 0.92),
        ("ER(10, 2), d'=100", 'Contrastive', 'auroc', '>=', 0.95),
    ],
    'table3': [
        ('ER(4, 2)', 'Contrastive', 'mcc', '>=', 0.60),
    ],
}

# シフト掃引: η = SHIFT_GAP_HIGH の MCC が η = 0 の MCC を SHIFT_GAP 以上上回る
SHIFT_GAP_LOW = 0.0
SHIFT_GAP_HIGH = 1.5
SHIFT_GAP = 0.2

_RELATIONS = {'>=': operator.ge, '<=': operator.le, '>': operator.gt, '<': operator.lt}


@dataclass
class RunOutcome:
    """1 シード分の実行結果。失敗しても例外ではなく status='error' で返す。"""
    seed: int
    status: str
    report: MetricsReport | None = None
    message: str = ''
    best_epoch: int = -1
    best_val_ce: float = float('nan')

    @property
    def ok(self) -> bool:
        return self.status == 'ok'


@dataclass
class SeedArtifacts:
    """1 シード分の生成物（ファイル出力やテストで使う）。"""
    family: ScmFamily
    mixing: MixingFunction
    datasets: list[np.ndarray]
    latents: list[np.ndarray]
    rejected: list[int] = field(default_factory=list)


# ── 1 シードのパイプライン ───────────────────────────────────────────────────


def seed_record(seed: int) -> dict[str, Any]:
    """レポートに残すシード連鎖。"""
    return {
        'master': seed,
        'family': seed_chain(seed, (STREAM_FAMILY,)),
        'mixing': seed_chain(seed, (STREAM_MIXING,)),
        'data': seed_chain(seed, (STREAM_DATA,)),
        'train': seed_chain(seed, (STREAM_TRAIN,)),
        'eval': seed_chain(seed, (STREAM_EVAL,)),
    }


def generate_data(cfg: ExperimentConfig, seed: int) -> SeedArtifacts:
    """seed_record(seed) に記録されるシード連鎖からデータを作る。"""
    chains = seed_record(seed)
    family = sample_family(
        cfg.d, cfg.k, rng_from_chain(chains['family']),
        variance_obs=cfg.variance_obs, variance_int=cfg.variance_int,
        shift_range=cfg.shift_range, kind=cfg.intervention,
    )
    mixing = make_mixing(cfg.mixing, cfg.d, cfg.d_prime, rng_from_chain(chains['mixing']))
    samples = sample_observations(family, mixing, cfg.n, rng_from_chain(chains['data']))
    return SeedArtifacts(
        family=family, mixing=mixing,
        datasets=[s.X for s in samples], latents=[s.Z for s in samples],
        rejected=[s.rejected for s in samples],
    )


def expected_edges(cfg: ExperimentConfig) -> int:
    """選ぶ辺の本数。ER グラフの辺の期待値 k·d を、有り得る辺の数 d(d−1)/2 で頭打ちにする。"""
    return min(int(round(cfg.k * cfg.d)), cfg.d * (cfg.d - 1) // 2)


def evaluate_model(
    model: ContrastiveModel,
    family: ScmFamily,
    X: np.ndarray,
    Z_true: np.ndarray,
    m: int,
    *,
    seeds: dict[str, Any] | None = None,
    config: dict[str, Any] | None = None,
    eta_zero: bool = False,
) -> MetricsReport:
    """観測データ (X, Z_true) 上で潜在変数とグラフの指標を計算する。"""
    Z_hat = embed(model, X)
    scores, selected = extract_graph(model, m)
    report = evaluate_run(Z_true, Z_hat, family.dag.edges, family.d, scores, selected,
                          seeds=seeds, config=config)
    report.diagnostics['best_epoch'] = model.best_epoch
    report.diagnostics['best_val_ce'] = model.best_val_ce
    if eta_zero and len(Z_true) > 1:
        diag = eta_zero_diagnostic(Z_hat, Z_true)
        report.diagnostics['corr_abs'] = diag.corr_abs.tolist()
        report.diagnostics['corr_signed'] = diag.corr_signed.tolist()
        report.diagnostics['abs_wins'] = diag.abs_wins
    return report


def run_seed(cfg: ExperimentConfig, seed: int, echo: dict[str, Any] | None = None) -> RunOutcome:
    """1 シード分のパイプライン。どの段階の失敗も RunOutcome(status='error') にする。"""
    try:
        chains = seed_record(seed)
        art = generate_data(cfg, seed)
        model = train(art.datasets, replace(cfg.train, seed=seed),
                      rng_from_chain(chains['train']))
        eval_sample = sample_environment(art.family, art.mixing, 0, cfg.n,
                                         rng_from_chain(chains['eval']))
        report = evaluate_model(
            model, art.family, eval_sample.X, eval_sample.Z, expected_edges(cfg),
            seeds=chains, config=echo if echo is not None else cfg.to_dict(),
            eta_zero=cfg.shift_range[1] == 0.0,
        )
    except Exception as e:
        logger.exception('シード %s の実行に失敗しました', seed)
        return RunOutcome(seed=seed, status='error', message=f'{type(e).__name__}: {e}')
    logger.info('シード %s: MCC=%.3f SHD=%s AUROC=%.3f R²=%.3f',
                seed, report.mcc, report.shd, report.auroc, report.r2)
    return RunOutcome(seed=seed, status='ok', report=report,
                      best_epoch=model.best_epoch, best_val_ce=model.best_val_ce)


def _run_seed_task(args: tuple[ExperimentConfig, int, dict[str, Any] | None]) -> RunOutcome:
    return run_seed(*args)


def run_experiment(
    cfg: ExperimentConfig, *, threads: int = 1, echo: dict[str, Any] | None = None,
) -> list[RunOutcome]:
    """シード cfg.seed, cfg.seed+1, … の runs 回を実行する。結果はシード順。"""
    seeds = [cfg.seed + r for r in range(cfg.runs)]
    tasks = [(cfg, s, echo) for s in seeds]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
            outcomes = list(pool.map(_run_seed_task, tasks))
    else:
        outcomes = [_run_seed_task(t) for t in tasks]
    failed = [o.seed for o in outcomes if not o.ok]
    if failed:
        logger.warning('%s: 失敗したシード %s', cfg.setting or '実験', failed)
    return outcomes


def outcome_rows(cfg: ExperimentConfig, outcomes: list[RunOutcome]) -> list[dict[str, Any]]:
    """成功したシードの指標を aggregate 用の行にする。

    η = 0 の診断があれば、|Z| 側が勝った座標の割合を abs_wins_share として加える。
    """
    rows = []
    for o in outcomes:
        if not o.ok or o.report is None:
            continue
        row = {'setting': cfg.setting, 'method': cfg.method, 'seed': o.seed,
               'shd': o.report.shd, 'auroc': o.report.auroc, 'mcc': o.report.mcc,
               'r2': o.report.r2}
        if 'abs_wins' in o.report.diagnostics:
            row['abs_wins_share'] = o.report.diagnostics['abs_wins'] / cfg.d
        rows.append(row)
    return rows


def _outcome_dict(o: RunOutcome) -> dict[str, Any]:
    return {
        'seed': o.seed, 'status': o.status, 'message': o.message,
        'best_epoch': o.best_epoch, 'best_val_ce': o.best_val_ce,
        'report': o.report.to_dict() if o.report is not None else None,
    }


# ── 表の再現・シフト掃引 ─────────────────────────────────────────────────────


def _acceptance_result(
    table_id: str, setting: str, method: str, metric: str, value: float, op: str,
    threshold: float,
) -> dict[str, Any]:
    passed = bool(np.isfinite(value) and _RELATIONS[op](value, threshold))
    if not passed:
        logger.warning('%s %s / %s: %s=%.3f が基準 %s %s を満たしません',
                       table_id, setting, method, metric, value, op, threshold)
    return {'setting': setting, 'method': method, 'metric': metric,
            'value': value, 'relation': op, 'threshold': threshold, 'passed': passed}


def _check_shift_gap(table: pd.DataFrame) -> list[dict[str, Any]]:
    """η = SHIFT_GAP_HIGH と η = 0 の MCC の差。どちらかの η が無ければ飛ばす。"""
    low = table[np.isclose(table['eta'].astype(float), SHIFT_GAP_LOW)]
    high = table[np.isclose(table['eta'].astype(float), SHIFT_GAP_HIGH)]
    if low.empty or high.empty or 'mcc_mean' not in table:
        return []
    gap = float(high.iloc[0]['mcc_mean']) - float(low.iloc[0]['mcc_mean'])
    return [_acceptance_result(
        'sweep_shift', f'η={SHIFT_GAP_HIGH:g} − η={SHIFT_GAP_LOW:g}',
        str(high.iloc[0]['Method']), 'mcc_gap', gap, '>=', SHIFT_GAP,
    )]


def check_acceptance(table_id: str, table: pd.DataFrame) -> list[dict[str, Any]]:
    """合格基準を集計表に当てはめる。該当行・列が無い基準は飛ばす。

    table_id が 'sweep_shift' のときは η = 0 と η = SHIFT_GAP_HIGH の MCC の差を調べる。
    """
    if table.empty:
        return []
    if table_id == 'sweep_shift':
        return _check_shift_gap(table)
    results = []
    for setting, method, metric, op, threshold in ACCEPTANCE.get(table_id, []):
        rows = table[(table['Setting'] == setting) & (table['Method'] == method)]
        column = f'{metric}_mean'
        if rows.empty or column not in rows:
            continue
        results.append(_acceptance_result(table_id, setting, method, metric,
                                          float(rows.iloc[0][column]), op, threshold))
    return results


def _with_provenance(table: pd.DataFrame, config: dict[str, Any], seeds: list[int]) -> pd.DataFrame:
    info = provenance(config, seeds)
    table = table.copy()
    table['config_hash'] = info['config_hash']
    table['git_describe'] = info['git_describe']
    table['seeds'] = ';'.join(str(s) for s in seeds)
    return table


def _write_table(
    table: pd.DataFrame, details: dict[str, Any], out_dir: str, stem: str, xlsx: bool,
) -> str:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f'{stem}.csv')
    export_csv(table, csv_path)
    export_json(details, os.path.join(out_dir, f'{stem}.json'))
    if xlsx:
        export_excel(table, os.path.join(out_dir, f'{stem}.xlsx'))
    logger.info('結果を書き出しました: %s', csv_path)
    return csv_path


def replicate(
    table_id: str,
    scale: str,
    *,
    base_config: dict[str, Any] | None = None,
    seed: int | None = None,
    out_dir: str = './output',
    threads: int = 1,
    xlsx: bool = False,
) -> pd.DataFrame:
    """表 table_id を scale（full / desk）で再現し、Setting, Method, SHD, AUROC, MCC, R² の表を返す。"""
    rows: list[dict[str, Any]] = []
    runs: list[dict[str, Any]] = []
    all_seeds: list[int] = []
    configs = preset_configs(table_id, scale, base_config)
    for raw in configs:
        if seed is not None:
            raw['experiment']['seed'] = seed
        cfg = experiment_config_from_dict(raw)
        logger.info('%s: %s / %s を実行します（runs=%s）', table_id, cfg.setting, cfg.method, cfg.runs)
        echo = {**cfg.to_dict(), 'overridden': overridden_fields(raw)}
        outcomes = run_experiment(cfg, threads=threads, echo=echo)
        rows += outcome_rows(cfg, outcomes)
        runs.append({'setting': cfg.setting, 'method': cfg.method, 'config': echo,
                     'outcomes': [_outcome_dict(o) for o in outcomes]})
        all_seeds += [o.seed for o in outcomes if o.seed not in all_seeds]
    table = aggregate(rows)
    acceptance = check_acceptance(table_id, table)
    table = _with_provenance(table, {'table': table_id, 'scale': scale, 'configs': configs},
                             all_seeds)
    details = {
        'table': table_id, 'scale': scale,
        **provenance({'table': table_id, 'scale': scale, 'configs': configs}, all_seeds),
        'acceptance': acceptance, 'runs': runs,
    }
    _write_table(table, details, out_dir, f'{table_id}_{scale}', xlsx)
    return table


def sweep_shift(
    cfg: ExperimentConfig,
    eta_values: list[float],
    *,
    out_dir: str = './output',
    threads: int = 1,
    xlsx: bool = False,
) -> pd.DataFrame:
    """シフト量 η ごとに run_experiment を行い、指標と η の表を返す。

    η = 0 と η = SHIFT_GAP_HIGH が両方あれば、MCC の差を check_acceptance で調べて JSON に残す。
    """
    if not eta_values:
        raise ValueError('eta_values が空です')
    frames = []
    runs = []
    for eta in eta_values:
        eta = abs(float(eta))
        sub = replace(cfg, shift_range=(eta, eta), setting=f'{cfg.setting} η={eta:g}'.strip())
        outcomes = run_experiment(sub, threads=threads)
        part = aggregate(outcome_rows(sub, outcomes))
        part.insert(0, 'eta', eta)
        frames.append(part)
        runs.append({'eta': eta, 'config': sub.to_dict(),
                     'outcomes': [_outcome_dict(o) for o in outcomes]})
    table = pd.concat(frames, ignore_index=True)
    acceptance = check_acceptance('sweep_shift', table)
    seeds = [cfg.seed + r for r in range(cfg.runs)]
    echo = {'config': cfg.to_dict(), 'etas': [abs(float(e)) for e in eta_values]}
    table = _with_provenance(table, echo, seeds)
    details = {**provenance(echo, seeds), 'acceptance': acceptance, 'runs': runs}
    _write_table(table, details, out_dir, 'sweep_shift', xlsx)
    return table


# ── generate / train / eval のファイル入出力 ─────────────────────────────────


def _obs_path(directory: str, env_index: int) -> str:
    return os.path.join(directory, f'env{env_index}_obs.bin')


def _latent_path(directory: str, env_index: int) -> str:
    return os.path.join(directory, f'env{env_index}_latents.bin')


def generate_to_dir(cfg: ExperimentConfig, out_dir: str) -> SeedArtifacts:
    """ファミリー JSON と環境ごとの潜在変数・観測ファイルを書き出す。"""
    os.makedirs(out_dir, exist_ok=True)
    art = generate_data(cfg, cfg.seed)
    save_family(art.family, os.path.join(out_dir, FAMILY_FILE),
                seed_chain(cfg.seed, (STREAM_FAMILY,)))
    for idx, (X, Z) in enumerate(zip(art.datasets, art.latents, strict=True)):
        write_dataset(_obs_path(out_dir, idx), X, idx, cfg.seed)
        write_dataset(_latent_path(out_dir, idx), Z, idx, cfg.seed)
    if art.mixing.variant == 'image':
        save_preview(art.datasets[0], art.mixing, os.path.join(out_dir, 'preview.png'))
    export_json({'config': cfg.to_dict(), 'seeds': seed_record(cfg.seed),
                 'rejected': art.rejected, **provenance(cfg.to_dict(), seed_record(cfg.seed))},
                os.path.join(out_dir, 'generate.json'))
    logger.info('データを書き出しました: %s（環境 %s 個）', out_dir, len(art.datasets))
    return art


def read_datasets(data_dir: str, *, latents: bool = False) -> list[np.ndarray]:
    """env0, env1, … の順にファイルを読む（画像は uint8 のまま）。"""
    path_fn = _latent_path if latents else _obs_path
    out = []
    idx = 0
    while os.path.exists(path_fn(data_dir, idx)):
        _, X = read_dataset(path_fn(data_dir, idx), raw=not latents)
        out.append(X)
        idx += 1
    if not out:
        raise FileNotFoundError(f'データファイルが見つかりません: {path_fn(data_dir, 0)}')
    return out


def train_from_dir(cfg: ExperimentConfig, data_dir: str, out_dir: str) -> ContrastiveModel:
    """データディレクトリから学習し、チェックポイントと学習曲線を書き出す。"""
    datasets = read_datasets(data_dir)
    model = train(datasets, cfg.train, make_rng(cfg.seed, (STREAM_TRAIN,)))
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(model, os.path.join(out_dir, CHECKPOINT_DIR),
                    seed=seed_chain(cfg.seed, (STREAM_TRAIN,)))
    curve = pd.DataFrame(model.curve, columns=['epoch', 'train_ce', 'val_ce', 'notears', 'lr'])
    export_csv(curve, os.path.join(out_dir, CURVE_FILE))
    return model


def eval_from_dir(
    cfg: ExperimentConfig, data_dir: str, model_dir: str, out_dir: str,
) -> MetricsReport:
    """観測環境のデータでチェックポイントを評価し、report.json / report.csv を書き出す。"""
    family, chain = load_family(os.path.join(data_dir, FAMILY_FILE))
    _, X = read_dataset(_obs_path(data_dir, 0), raw=True)
    _, Z = read_dataset(_latent_path(data_dir, 0))
    model = load_checkpoint(model_dir)
    report = evaluate_model(
        model, family, X, Z, expected_edges(cfg),
        seeds={'family': chain, 'master': cfg.seed}, config=cfg.to_dict(),
        eta_zero=cfg.shift_range[1] == 0.0,
    )
    os.makedirs(out_dir, exist_ok=True)
    export_json({**report.to_dict(), **provenance(cfg.to_dict(), report.seeds)},
                os.path.join(out_dir, REPORT_JSON))
    row = pd.DataFrame([{'setting': cfg.setting, 'method': cfg.method, 'shd': report.shd,
                         'auroc': report.auroc, 'mcc': report.mcc, 'r2': report.r2}])
    export_csv(_with_provenance(row, cfg.to_dict(), [cfg.seed]),
               os.path.join(out_dir, REPORT_CSV))
    return report
