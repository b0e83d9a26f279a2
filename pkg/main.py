import os
import sys

STRICT_REPRO_FLAG = "--strict-repro"
THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def pin_math_threads(argv) -> None:
    """Single-threaded BLAS for strict reproducibility.

    Must run before numpy is first imported, so the CLI and UI modules are imported lazily.
    """
    if STRICT_REPRO_FLAG in argv:
        for name in THREAD_VARIABLES:
            os.environ[name] = "1"


class SegbenchApp:
    """Interactive menu when started bare on a terminal, argparse CLI otherwise"""

    def __init__(self, argv=None):
        self.argv = list(sys.argv[1:] if argv is None else argv)

    @property
    def interactive(self) -> bool:
        return not self.argv and sys.stdin.isatty()

    def run(self) -> int:
        pin_math_threads(self.argv)
        if self.interactive:
            from views.menu_ui import MainUI
            try:
                MainUI().main_menu()
            except KeyboardInterrupt:
                return 130
            return 0
        from views import cli
        return cli.main(self.argv)

    def __repr__(self):
        return "SegbenchApp(argv={!r})".format(self.argv)


def main():
    """Application entry point"""
    sys.exit(SegbenchApp().run())


if __name__ == "__main__":
    main()
