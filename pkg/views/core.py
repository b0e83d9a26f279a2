import os
from typing import List, Optional
import questionary
from questionary import Style


class BaseUI:
    """Shared styling and prompt helpers for the interactive screens.

    Attributes:
        style (Style): questionary style used by every prompt.
    """

    def __init__(self):
        self._init_style()

    def _init_style(self):
        """Initialize UI style configuration"""
        self.style = Style([
            ('qmark', 'fg:yellow bold'),
            ('question', 'bold'),
            ('answer', 'fg:green bold'),
            ('pointer', 'fg:yellow bold'),
            ('selected', 'fg:green'),
            ('instruction', 'fg:cyan'),
            ('example', 'fg:gray italic')
        ])

    def _clear_screen(self):
        """Clear terminal screen and reset cursor position"""
        try:
            os.system('cls' if os.name == 'nt' else 'clear')
        except OSError:
            print('\n' * 100)

    def _show_navigation_hint(self):
        print("\nNavigation: Use ↑↓ arrow keys to move, Enter/Return to select")

    def _ask_int(self, message: str, default: int, minimum: int = 0) -> Optional[int]:
        """Integer prompt validated in place"""
        def valid(text: str):
            try:
                return int(text) >= minimum or "Enter an integer >= {}".format(minimum)
            except ValueError:
                return "Enter an integer"

        answer = questionary.text(message, default=str(default), validate=valid, style=self.style).ask()
        return None if answer is None else int(answer)

    def _ask_path(self, message: str, default: str = "", only_directories: bool = False) -> Optional[str]:
        answer = questionary.path(message, default=default, only_directories=only_directories,
                                  style=self.style).ask()
        return answer.strip() if answer else None

    def _select(self, message: str, choices: List[str]) -> Optional[str]:
        return questionary.select(message, choices=choices, style=self.style).ask()

    def _pause(self):
        input("\nPress Enter to continue...")
