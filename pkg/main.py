import argparse
import logging
import sys
from pathlib import Path

# Add the project root to the Python path
project_root = str(Path(__file__).parent.absolute())
if project_root not in sys.path:
    sys.path.insert(0, project_root)

import config
from core import settings
from core.errors import VioError
from core.pipeline import Phase, run
from core.rig_simulator import simulate_dataset
from core.trajectory_eval import evaluate, load_trajectory

logger = logging.getLogger(__name__)


class VioApp:
    def __init__(self, args: argparse.Namespace):
        """Hold the parsed command line and dispatch to one subcommand."""
        self.args = args

    def _settings(self, path) -> dict:
        loaded = settings.load_settings(path) if path else {}
        return settings.apply_overrides(loaded, self.args.set)

    def run(self) -> int:
        """Run the estimator over recorded or simulated data."""
        args = self.args
        merged = self._settings(args.config)
        if args.deterministic:
            merged['pipeline.deterministic'] = True
        if args.imu_only:
            merged['pipeline.vision_updates'] = False
        rig = None
        if args.calib:
            rig = settings.load_calibration(args.calib)
        cfg = settings.build_pipeline_config(merged, rig, events_left=args.events_left,
                                             events_right=args.events_right, imu_path=args.imu,
                                             gt_path=args.gt, out_path=args.out)
        report = run(cfg)
        for line in report.as_lines():
            print(line)
        if report.metrics is not None and args.residuals:
            report.metrics.write_residuals(args.residuals)
        if report.phase == Phase.LOST:
            logger.error(f"Tracking lost, partial trajectory written to {args.out}")
            return 5
        return 0

    def simulate(self) -> int:
        """Generate a stereo event + IMU dataset from a scene file."""
        args = self.args
        merged = self._settings(None)
        merged['sim.seed'] = args.seed
        sim_cfg = settings.build_sim_config(merged)
        rig = settings.load_calibration(args.calib)
        dataset = simulate_dataset(args.scene, args.out_dir, rig, sim_cfg, binary=args.binary)
        settings.write_calibration(Path(args.out_dir) / 'calib.cfg', rig)
        print(f"events={dataset.n_events}")
        print(f"imu_samples={dataset.n_imu}")
        print(f"out_dir={args.out_dir}")
        return 0

    def evaluate(self) -> int:
        """Compare an estimated trajectory against ground truth."""
        args = self.args
        report = evaluate(load_trajectory(args.est), load_trajectory(args.gt), max_dt=args.max_dt,
                          align=args.align, rpe_delta=args.rpe_delta, rpe_unit=args.rpe_unit)
        for line in report.as_lines():
            print(line)
        if args.residuals:
            report.write_residuals(args.residuals)
        return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Stereo event-camera visual-inertial odometry toolkit")
    parser.add_argument('--verbose', '-v', action='store_true', help="debug logging")
    commands = parser.add_subparsers(dest='command', required=True)

    run_cmd = commands.add_parser('run', help="estimate a trajectory")
    run_cmd.add_argument('--config', default=config.DEFAULT_CALIB_PATH,
                         help="key=value settings file (may hold the rig calibration)")
    run_cmd.add_argument('--calib', help="separate rig calibration file")
    run_cmd.add_argument('--events-left', required=True)
    run_cmd.add_argument('--events-right', required=True)
    run_cmd.add_argument('--imu', required=True)
    run_cmd.add_argument('--gt', help="ground-truth trajectory for the metric report")
    run_cmd.add_argument('--out', required=True, help="output trajectory file")
    run_cmd.add_argument('--residuals', help="per-pair residual CSV (needs --gt)")
    run_cmd.add_argument('--deterministic', action='store_true', help="single-task schedule")
    run_cmd.add_argument('--imu-only', action='store_true', help="dead reckoning, no vision updates")
    run_cmd.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')

    sim_cmd = commands.add_parser('simulate', help="generate a synthetic dataset")
    sim_cmd.add_argument('--scene', default=config.DEFAULT_SCENE_PATH)
    sim_cmd.add_argument('--out-dir', required=True)
    sim_cmd.add_argument('--seed', type=int, default=config.SIM_SEED)
    sim_cmd.add_argument('--calib', default=config.DEFAULT_CALIB_PATH)
    sim_cmd.add_argument('--binary', action='store_true', help="write events in the binary format")
    sim_cmd.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')

    eval_cmd = commands.add_parser('evaluate', help="APE/RPE of a trajectory against ground truth")
    eval_cmd.add_argument('--est', required=True)
    eval_cmd.add_argument('--gt', required=True)
    eval_cmd.add_argument('--align', action=argparse.BooleanOptionalAction, default=True)
    eval_cmd.add_argument('--rpe-delta', type=float, default=config.EVAL_RPE_DELTA)
    eval_cmd.add_argument('--rpe-unit', choices=('frames', 'seconds'), default='frames')
    eval_cmd.add_argument('--max-dt', type=float, default=config.EVAL_MAX_DT)
    eval_cmd.add_argument('--residuals', help="per-pair residual CSV")
    return parser


def main(argv=None) -> int:
    """Main entry point for the application."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if (args.verbose or config.DEBUG) else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    app = VioApp(args)
    try:
        return getattr(app, args.command)()
    except VioError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
