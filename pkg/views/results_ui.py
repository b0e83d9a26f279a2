from typing import List, Optional, Sequence
from prettytable import PrettyTable
from .core import BaseUI
from controllers.report import ReportController
from models.metrics import AggregateRow, MetricsRecord
from utils.errors import SegbenchError

RECORD_HEADERS = [
    'Experiment', 'Architecture', 'Encoder', 'Init',
    'Sens %', 'Spec %', 'Dice %', 'Params (M)',
    'Train s/batch', 'Val s/batch', 'Status'
]

AGGREGATE_METRICS = ('sens', 'spec', 'dice', 'params_millions')

FIELD_NAMES = {
    'Experiment': 'experiment',
    'Architecture': 'architecture',
    'Encoder': 'encoder',
    'Init': 'weight_init',
    'Dice': 'dice',
    'Sensitivity': 'sens',
    'Specificity': 'spec',
    'Params': 'params_millions',
    'Train time': 'train_s_per_batch',
    'Status': 'status',
}


def _table(headers: Sequence[str]) -> PrettyTable:
    table = PrettyTable()
    table.field_names = list(headers)
    table.align = "l"
    for header in headers:
        if header not in ('Experiment', 'Architecture', 'Encoder', 'Init', 'Group', 'Status'):
            table.align[header] = "r"
    return table


def records_table(records: Sequence[MetricsRecord]) -> PrettyTable:
    """One row per benchmark cell"""
    table = _table(RECORD_HEADERS)
    for r in records:
        table.add_row([r.experiment, r.architecture, r.encoder, r.weight_init,
                       "{:.2f}".format(r.sens), "{:.2f}".format(r.spec), "{:.2f}".format(r.dice),
                       "{:.3f}".format(r.params_millions), "{:.4f}".format(r.train_s_per_batch),
                       "{:.4f}".format(r.val_s_per_batch), r.status if r.ok else "failed: {}".format(r.error or "")])
    return table


def aggregate_table(rows: Sequence[AggregateRow]) -> PrettyTable:
    """Mean ± sample std per group; single-member groups are marked with *"""
    if not rows:
        return _table(['Group', 'n'])
    headers = [name.replace('_', ' ').title() for name in rows[0].group_by] + ['n']
    headers += ['Sens %', 'Spec %', 'Dice %', 'Params (M)']
    table = _table(headers)
    for row in rows:
        cells = list(row.key) + ["{}{}".format(row.n, "*" if row.single else "")]
        for metric in AGGREGATE_METRICS:
            cells.append("{:.2f} ± {:.2f}".format(row.mean[metric], row.std[metric]))
        table.add_row(cells)
    return table


class ResultsUI(BaseUI):
    """Paged, sortable view over the metrics of one run"""

    DEFAULT_ITEMS_PER_PAGE = 12

    def __init__(self, report_controller: Optional[ReportController] = None):
        super().__init__()
        self.report_controller = report_controller or ReportController()
        self.items_per_page = self.DEFAULT_ITEMS_PER_PAGE

    def show_results_menu(self, run_dir: str) -> None:
        """Browse the records of run_dir page by page, with sort, filter and aggregate views"""
        try:
            all_records = self.report_controller.load_records(run_dir)
        except SegbenchError as e:
            print("\nCannot read run: {}".format(e))
            self._pause()
            return

        records = list(all_records)
        page = 1
        while True:
            if not records:
                print("\nNo records found")
                self._pause()
                break
            total_pages = self._get_total_pages(records)
            self._clear_screen()
            print("\nRun: {}".format(run_dir))
            print(records_table(self._page(records, page)))

            choices = ["Sort Records", "Filter Records", "Aggregate by Experiment and Init",
                       "Aggregate by Architecture", "Reset View"]
            if page > 1:
                choices.append("Previous Page")
            if page < total_pages:
                choices.append("Next Page")
            choices.append("Back to Main Menu")
            action = self._select("Page {}/{}".format(page, total_pages), choices)

            if action in (None, "Back to Main Menu"):
                break
            elif action == "Next Page":
                page = min(page + 1, total_pages)
            elif action == "Previous Page":
                page = max(page - 1, 1)
            elif action.startswith("Aggregate"):
                group_by = ('experiment', 'weight_init') if "Experiment" in action else ('experiment', 'architecture')
                self._show_aggregates(records, group_by)
            else:
                records = self.process_results_action(records, all_records, action)
                page = 1

    def process_results_action(self, records: List[MetricsRecord], all_records: List[MetricsRecord],
                               action: str) -> List[MetricsRecord]:
        if action == "Sort Records":
            return self.handle_sort(records)
        elif action == "Filter Records":
            return self.handle_filter(records)
        elif action == "Reset View":
            return list(all_records)
        return records

    def handle_sort(self, records: List[MetricsRecord]) -> List[MetricsRecord]:
        sort_by = self._select("Sort by:", list(FIELD_NAMES)[:-1] + ["Cancel"])
        if sort_by in (None, "Cancel"):
            return records
        order = self._select("Order:", ["Descending", "Ascending", "Cancel"])
        if order in (None, "Cancel"):
            return records
        return self.report_controller.sort_records(records, FIELD_NAMES[sort_by], order == "Ascending")

    def handle_filter(self, records: List[MetricsRecord]) -> List[MetricsRecord]:
        field = self._select("Select field to filter by:",
                             ['Experiment', 'Architecture', 'Encoder', 'Init', 'Status', 'Cancel'])
        if field in (None, "Cancel"):
            return records
        key = FIELD_NAMES[field]
        values = sorted({getattr(r, key) for r in records})
        value = self._select("Select {} value:".format(field.lower()), values + ["Cancel"])
        if value in (None, "Cancel"):
            return records
        return self.report_controller.filter_records(records, key, value)

    def _show_aggregates(self, records: List[MetricsRecord], group_by) -> None:
        try:
            rows = self.report_controller.aggregates(records, group_by)
        except SegbenchError as e:
            print("\n{}".format(e))
        else:
            print(aggregate_table(rows))
        self._pause()

    def _get_total_pages(self, records: Sequence[MetricsRecord]) -> int:
        return max(1, (len(records) + self.items_per_page - 1) // self.items_per_page)

    def _page(self, records: Sequence[MetricsRecord], page: int) -> Sequence[MetricsRecord]:
        start = (page - 1) * self.items_per_page
        return records[start:start + self.items_per_page]
