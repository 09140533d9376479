# Monte-Carlo acceptance checks; slow (minutes). Run after `pip install -e .`:
# python util/acceptance_report.py --seeds 200
import fire
import rich.traceback
from rich.console import Console
from rich.table import Table

from mahalvo.cli import effective_loglevel, setup_logging
from mahalvo.harness import compare_sampling, compare_weightings


def main(seeds: int = 200, sampling_seeds: int = 100, loglevel: str = None):
    setup_logging(log_level_str=effective_loglevel(loglevel))
    console = Console()

    weighting = compare_weightings(range(seeds))
    table = Table(title=f'Refinement under 5:1 anisotropic noise ({seeds} seeds)')
    table.add_column('weighting')
    table.add_column('median rotation error (deg)', justify='right')
    table.add_column('median sym. epipolar error (px^2)', justify='right')
    table.add_column('beats unweighted', justify='right')
    for scheme in weighting.errors:
        table.add_row(scheme, f'{weighting.median_rotation(scheme):.4f}', f'{weighting.median(scheme):.5f}',
                      '-' if scheme == 'none' else f'{100 * weighting.win_rate(scheme, "none"):.1f}%')
    console.print(table)

    sampling = compare_sampling(range(sampling_seeds))
    table = Table(title=f'Draws to an all-inlier minimal set, 70 inliers + 30 outliers ({sampling_seeds} seeds)')
    table.add_column('sampling')
    table.add_column('median draws', justify='right')
    for scheme in sampling.draws:
        table.add_row(scheme, f'{sampling.median(scheme):.1f}')
    console.print(table)

    # rotation ordering mahalanobis <= sampson <= none, with a 10% margin over unweighted
    ok = weighting.rotation_ordering_holds(margin=0.10) \
        and sampling.median('multinomial') < sampling.median('uniform')
    console.print('[green]PASS[/green]' if ok else '[red]FAIL[/red]')
    return 0 if ok else 1


if __name__ == '__main__':
    rich.traceback.install(show_locals=False, extra_lines=1, word_wrap=True)
    fire.Fire(main)
