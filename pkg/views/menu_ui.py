import pydoc
from pathlib import Path
from typing import List, Optional
import questionary
from .core import BaseUI
from .results_ui import ResultsUI
from . import cli
from utils.validators import ENCODER_FAMILIES, EXPERIMENTS

HELP_FILE = Path(__file__).resolve().parent.parent / "utils" / "help.txt"


class MainUI(BaseUI):
    """Interactive front end that collects arguments and runs the same commands as the CLI"""

    def __init__(self, results_ui: Optional[ResultsUI] = None):
        super().__init__()
        self.results_ui = results_ui or ResultsUI()
        self.last_run: str = "runs/smoke"

    def main_menu(self):
        while True:
            choice = self.get_menu_choice()
            if choice is None or choice == "Exit":
                if choice is None or self._confirm_exit():
                    break
                continue
            self.handle_menu_choice(choice)

    def get_menu_choice(self) -> Optional[str]:
        self._clear_screen()
        self._show_navigation_hint()
        return self._select("What would you like to do?",
                            list(cli.COMMANDS.values()) + ["Browse Results", "Help", "Exit"])

    def handle_menu_choice(self, choice: str):
        """Route a menu entry to its prompt sequence, then run it through the CLI"""
        if choice == "Browse Results":
            run_dir = self._ask_path("Run directory:", self.last_run, only_directories=True)
            if run_dir:
                self.results_ui.show_results_menu(run_dir)
            return
        if choice == "Help":
            self._show_help()
            return
        prompts = {
            "Generate Synthetic Dataset": self._generate_args,
            "Run Benchmark": self._benchmark_args,
            "Evaluate Checkpoint": self._evaluate_args,
            "Write Report": self._report_args,
            "Pretrain Encoder": self._pretrain_args,
        }
        argv = prompts[choice]()
        if argv is None:
            return
        code = cli.main(argv)
        print("\nFinished with exit code {}".format(code))
        self._pause()

    def _generate_args(self) -> Optional[List[str]]:
        n = self._ask_int("Number of slices:", 20, minimum=3)
        shape = self._ask_int("Slice side length:", 64, minimum=8)
        seed = self._ask_int("Seed:", 0)
        out = self._ask_path("Output directory:", "data/synthetic", only_directories=True)
        if None in (n, shape, seed) or not out:
            return None
        balanced = questionary.confirm("Large (balanced) lesions?", default=False, style=self.style).ask()
        argv = ["generate-synthetic", "--n", str(n), "--shape", str(shape), "--seed", str(seed), "--out", out]
        return argv + (["--balanced"] if balanced else [])

    def _benchmark_args(self) -> Optional[List[str]]:
        config = self._ask_path("Benchmark config:", "configs/smoke_matrix.json")
        out = self._ask_path("Run directory:", self.last_run, only_directories=True)
        jobs = self._ask_int("Parallel jobs:", 1, minimum=1)
        if not config or not out or jobs is None:
            return None
        strict = questionary.confirm("Strict reproducibility?", default=True, style=self.style).ask()
        self.last_run = out
        argv = ["benchmark", "--config", config, "--out", out, "--jobs", str(jobs)]
        return argv + (["--strict-repro"] if strict else [])

    def _evaluate_args(self) -> Optional[List[str]]:
        checkpoint = self._ask_path("Checkpoint:")
        dataset = self._ask_path("Dataset manifest or directory:")
        experiment = self._select("Experiment:", list(EXPERIMENTS))
        split = self._select("Split:", ["test", "val", "train"])
        if not checkpoint or not dataset or not experiment or not split:
            return None
        return ["evaluate", "--checkpoint", checkpoint, "--dataset", dataset, "--experiment", experiment,
                "--split", split]

    def _report_args(self) -> Optional[List[str]]:
        run_dir = self._ask_path("Run directory:", self.last_run, only_directories=True)
        if not run_dir:
            return None
        artifacts = questionary.checkbox(
            "Artifacts (Space to toggle):",
            choices=[questionary.Choice("histograms", checked=True), questionary.Choice("scatter", checked=True),
                     questionary.Choice("weights"), questionary.Choice("volumes"),
                     questionary.Choice("overlays"), questionary.Choice("table", checked=True)],
            style=self.style).ask()
        if artifacts is None:
            return None
        return ["report", "--run", run_dir] + ["--" + a for a in artifacts]

    def _pretrain_args(self) -> Optional[List[str]]:
        dataset = self._ask_path("Dataset manifest or directory:")
        encoder = self._select("Encoder family:", list(ENCODER_FAMILIES))
        epochs = self._ask_int("Epochs:", 10, minimum=1)
        out = self._ask_path("Checkpoint path:", "pretrained/{}.ckpt".format(encoder or "encoder"))
        if not dataset or not encoder or epochs is None or not out:
            return None
        return ["pretrain-encoder", "--dataset", dataset, "--encoder", encoder, "--epochs", str(epochs),
                "--out", out]

    def _show_help(self):
        self._clear_screen()
        try:
            help_text = HELP_FILE.read_text(encoding="utf-8")
        except OSError as e:
            print("\nError loading help documentation: {}".format(e))
            return
        pydoc.pager("\nHelp Documentation - press q to exit:\n=================\n\n" + help_text)
        self._clear_screen()

    def _confirm_exit(self) -> bool:
        confirmed = questionary.confirm("Do you really want to exit?", default=False, style=self.style).ask()
        if confirmed:
            self._clear_screen()
        return bool(confirmed)
