from typing import Any, Dict

from torch.utils.tensorboard import SummaryWriter
from tqdm import tqdm

from latentforge.models import TraceRow


class tqdm(tqdm):
    @property
    def format_dict(self):
        d = super().format_dict

        # Make the bar yellow
        d.update({"colour": "yellow"})

        # ... and green when finished
        if d["n"] == d["total"]: d.update({"colour": "green"})

        return d


class TraceWriter(SummaryWriter):
    """ SummaryWriter that knows how to log trace rows and run configs """

    def add_trace_row(self, tag: str, row: TraceRow):
        step = row.iteration
        self.add_scalar(f"{tag}/s", row.score, step)
        self.add_scalar(f"{tag}/gnorm_s", row.gnorm_s, step)
        if row.loss or row.lam or row.gnorm_l:
            self.add_scalar(f"{tag}/l", row.loss, step)
            self.add_scalar(f"{tag}/lambda", row.lam, step)
            self.add_scalar(f"{tag}/gnorm_l", row.gnorm_l, step)

    def add_config(self, config: Dict[str, Any]):
        self.add_text(
            "hyperparameters",
            "|param|value|\n|-|-|\n%s" % ("\n".join([f"|{key}|{value}|" for key, value in flatten_dict(config).items()])),
        )


def flatten_dict(d: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """ {"aug": {"n_draws": 16}} -> {"aug.n_draws": 16} """
    flat = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_dict(value, f"{name}."))
        else:
            flat[name] = value
    return flat
