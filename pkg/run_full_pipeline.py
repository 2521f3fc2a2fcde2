#!/usr/bin/env python3
"""
Full Pretraining Pipeline Orchestrator
Runs the complete end-to-end workflow:
1. Corpus synthesis (src/main.py synth) - procedural image/video corpus
2. Pretraining (src/main.py pretrain) - decoupled joint pretraining
3. Evaluation (src/main.py eval) - retrieval, zero-shot, probe, captioning, QA

Usage:
    python run_full_pipeline.py --workdir work
    python run_full_pipeline.py --config config/toy.json --seed 1
    python run_full_pipeline.py --skip-synth            # reuse work/corpus
    python run_full_pipeline.py --tasks retrieval probe # subset of evaluations
"""

import argparse
import logging
import subprocess
import sys
import time
from pathlib import Path

from dotenv import load_dotenv

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

DEFAULT_TASKS = ("retrieval", "zeroshot", "probe", "caption", "qa")


class PipelineOrchestrator:
    """Orchestrates synth -> pretrain -> eval as separate CLI runs"""

    def __init__(self, workdir="work", config=None, seed=0, tasks=DEFAULT_TASKS,
                 skip_synth=False, video_fraction=0.5, continue_on_error=False):
        load_dotenv()
        self.project_root = Path(__file__).parent
        self.main_script = self.project_root / "src" / "main.py"
        self.workdir = Path(workdir)
        self.config = config
        self.seed = seed
        self.tasks = list(tasks)
        self.skip_synth = skip_synth
        self.video_fraction = video_fraction
        self.continue_on_error = continue_on_error

        self.corpus_dir = self.workdir / "corpus"
        self.run_dir = self.workdir / "run"
        self.eval_dir = self.workdir / "eval"

    def print_banner(self, title):
        logger.info("=" * 70)
        logger.info(f"  {title}")
        logger.info("=" * 70)

    def _cli(self, command, *extra):
        cmd = [sys.executable, str(self.main_script), command]
        if self.config:
            cmd += ["--config", str(self.config)]
        return cmd + list(extra)

    def run_command(self, cmd, step_name):
        """Run one step; returns True when the pipeline may continue."""
        self.print_banner(f"STEP: {step_name}")
        logger.info(f"Command: {' '.join(cmd)}")
        start_time = time.time()

        try:
            result = subprocess.run(cmd, cwd=str(self.project_root), text=True)
        except FileNotFoundError:
            logger.error(f"Script not found: {cmd[0]}")
            return False

        elapsed = time.time() - start_time
        if result.returncode == 0:
            logger.info(f"{step_name} completed in {elapsed:.1f} seconds")
            return True

        logger.error(f"{step_name} failed with exit code {result.returncode} after {elapsed:.1f} seconds")
        if self.continue_on_error:
            logger.warning("Continuing to next step despite error...")
            return True
        return False

    def step1_synth(self):
        if self.skip_synth:
            logger.info("Skipping corpus synthesis (--skip-synth flag)")
            return (self.corpus_dir / "manifest.jsonl").exists()
        return self.run_command(
            self._cli("synth", "--outdir", str(self.corpus_dir), "--seed", str(self.seed),
                      "--video-fraction", str(self.video_fraction)),
            "Corpus synthesis")

    def step2_pretrain(self):
        return self.run_command(
            self._cli("pretrain", "--outdir", str(self.run_dir), "--seed", str(self.seed),
                      "--override", f"corpus.manifest={self.corpus_dir / 'manifest.jsonl'}"),
            "Pretraining")

    def step3_eval(self):
        checkpoints = sorted((self.run_dir / "checkpoints").glob("ckpt_*.npz"))
        if not checkpoints:
            logger.error(f"No checkpoint found in {self.run_dir / 'checkpoints'}")
            return False
        for task in self.tasks:
            ok = self.run_command(
                self._cli("eval", "--task", task, "--checkpoint", str(checkpoints[-1]),
                          "--outdir", str(self.eval_dir), "--seed", str(self.seed),
                          "--override", f"corpus.manifest={self.corpus_dir / 'manifest.jsonl'}"),
                f"Evaluation: {task}")
            if not ok:
                return False
        return True

    def run(self):
        self.print_banner("OMNIVL DESK PIPELINE")
        pipeline_start = time.time()

        for step, name in ((self.step1_synth, "Corpus synthesis"),
                           (self.step2_pretrain, "Pretraining"),
                           (self.step3_eval, "Evaluation")):
            if not step():
                logger.error(f"Pipeline failed at step: {name}")
                return False

        total_time = time.time() - pipeline_start
        self.print_banner("PIPELINE COMPLETED")
        logger.info(f"Total time: {total_time:.1f} seconds ({total_time/60:.1f} minutes)")
        logger.info(f"  corpus:  {self.corpus_dir}")
        logger.info(f"  run:     {self.run_dir}")
        logger.info(f"  reports: {self.eval_dir}")
        return True


def main():
    parser = argparse.ArgumentParser(
        description='Synthesize, pretrain and evaluate in one go',
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--workdir', default='work', help='Root for corpus, run and reports')
    parser.add_argument('--config', default=None, help='Config file passed to every step')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--tasks', nargs='+', default=list(DEFAULT_TASKS), choices=list(DEFAULT_TASKS))
    parser.add_argument('--skip-synth', action='store_true', help='Reuse an existing corpus')
    parser.add_argument('--video-fraction', type=float, default=0.5)
    parser.add_argument('--continue-on-error', action='store_true')
    args = parser.parse_args()

    orchestrator = PipelineOrchestrator(
        workdir=args.workdir,
        config=args.config,
        seed=args.seed,
        tasks=args.tasks,
        skip_synth=args.skip_synth,
        video_fraction=args.video_fraction,
        continue_on_error=args.continue_on_error,
    )
    return 0 if orchestrator.run() else 1


if __name__ == '__main__':
    sys.exit(main())
