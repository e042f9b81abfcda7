"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Values parse as int,
float, bool (``true``/``false``), ``none`` or a bare string, according to the
field's default. Saving writes every field with its unit comment, so a saved
file loads back to an equal config.
"""

from dataclasses import asdict, dataclass, fields

from .anomaly import THETA_ANOMALY
from .community import ALPHA, THETA_Z


class ConfigError(ValueError):
    pass


# field -> comment written next to it
UNITS = {
    "seed": "integer seed for every random stream",
    "n_communities": "K, real communities (pseudo-community extra)",
    "pseudo": "add the pseudo-community column",
    "theta_z": "membership clip threshold for community embeddings, probability",
    "alpha": "scaled-cosine factor, dimensionless",
    "batch_size": "nodes per batch",
    "c": "communities sampled per batch",
    "epochs": "passes over the nodes",
    "lr": "Adam learning rate",
    "embedder_lr": "Adam learning rate of embedder and free table (none = lr)",
    "d_model": "embedder width",
    "d_out": "embedding width",
    "m": "representative sequence length, nodes",
    "free_dim": "trainable per-node table width (0 = attributes only)",
    "pooling": "mean | attention",
    "repr_key": "degree | jaccard | weight",
    "kernel": "raw | embedding",
    "num_negatives": "negatives per positive pair",
    "w_sbm": "weight of the sbm term",
    "w_entropy": "weight of the entropy term",
    "w_link": "weight of the link term",
    "w_labels": "weight of the label term",
    "align_epochs": "alignment epochs",
    "align_lr": "alignment Adam learning rate",
    "align_entropy": "weight of the alignment entropy term",
    "align_k": "candidates reported per node",
    "align_tied": "share one projection between both graphs",
    "theta_anomaly": "alarm threshold on the normalised principal score",
    "theta_corr": "correlation clipping threshold (none = calibrate)",
    "corr_factor": "calibration factor times mean |r| of a clean window",
    "anomaly_communities": "K for the anomaly detector",
    "anomaly_epochs": "detector epochs over the training windows",
    "anomaly_lr": "detector Adam learning rate",
    "anomaly_d": "detector embedder width",
    "min_set_size": "smallest scored set, features",
}


@dataclass
class RunConfig:
    seed: int = 0
    n_communities: int = 2
    pseudo: bool = True
    theta_z: float = THETA_Z
    alpha: float = ALPHA
    batch_size: int = 256
    c: int = 3
    epochs: int = 50
    lr: float = 1e-3
    embedder_lr: float = None
    d_model: int = 64
    d_out: int = 64
    m: int = 16
    free_dim: int = 8
    pooling: str = "mean"
    repr_key: str = "degree"
    kernel: str = "raw"
    num_negatives: int = 5
    w_sbm: float = 1.0
    w_entropy: float = 1.0
    w_link: float = 1.0
    w_labels: float = 1.0
    align_epochs: int = 20
    align_lr: float = 1e-2
    align_entropy: float = 1.0
    align_k: int = 5
    align_tied: bool = False
    theta_anomaly: float = THETA_ANOMALY
    theta_corr: float = None
    corr_factor: float = 1.5
    anomaly_communities: int = 2
    anomaly_epochs: int = 10
    anomaly_lr: float = 5e-3
    anomaly_d: int = 32
    min_set_size: int = 10

    def loss_weights(self):
        return {"sbm": self.w_sbm, "entropy": self.w_entropy, "link": self.w_link, "labels": self.w_labels}

    def nsbm_params(self):
        return dict(
            n_communities=self.n_communities, pseudo=self.pseudo, d_model=self.d_model, d_out=self.d_out,
            m=self.m, free_dim=self.free_dim, pooling=self.pooling, repr_key=self.repr_key,
            epochs=self.epochs, batch_size=self.batch_size, c=self.c, lr=self.lr,
            embedder_lr=self.embedder_lr, alpha=self.alpha, num_negatives=self.num_negatives,
            loss_weights=self.loss_weights(), theta_z=self.theta_z, kernel=self.kernel,
            random_state=self.seed,
        )

    def detector_params(self):
        return dict(
            n_communities=self.anomaly_communities, theta_anomaly=self.theta_anomaly,
            theta_corr=self.theta_corr, corr_factor=self.corr_factor, min_set_size=self.min_set_size,
            d_model=self.anomaly_d, d_out=self.anomaly_d, m=self.m, epochs=self.anomaly_epochs,
            lr=self.anomaly_lr, random_state=self.seed,
        )

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {format_value(v)}  # {UNITS[f.name]}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text):
        types = {f.name: f for f in fields(cls)}
        defaults = cls()
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (x.strip() for x in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = parse_value(value, types[key], getattr(defaults, key), lineno)
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def as_dict(self):
        return asdict(self)


def format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FLOAT_FIELDS = {"embedder_lr", "theta_corr"}


def parse_value(text, f, default, lineno=0):
    low = text.lower()
    if low == "none":
        if default is None:
            return None
        raise ConfigError(f"line {lineno}: {f.name} cannot be none")
    try:
        if isinstance(default, bool):
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or f.name in _FLOAT_FIELDS:
            return float(text)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {text!r} for {f.name}") from None
    return text
