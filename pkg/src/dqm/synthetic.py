"""Synthetic connection records in the NSL-KDD text layout.

Used as a test fixture and for demo runs when the real dataset files are
not at hand. The generator mimics the coarse structure of the real data
(label mix, protocol/service/flag vocabularies, the rate features that
separate flooding and probing traffic from normal sessions) with enough
overlap that linear classifiers do not reach perfect accuracy. Numbers it
produces say nothing about the real dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import COLUMNS, RawRecord

# label -> weight; roughly the KDDTrain+ mix
LABEL_MIX = {
    "normal": 0.535, "neptune": 0.327, "satan": 0.029, "ipsweep": 0.029,
    "portsweep": 0.023, "smurf": 0.021, "nmap": 0.012, "back": 0.008,
    "teardrop": 0.007, "warezclient": 0.007, "guess_passwd": 0.002,
}
NORMAL_SERVICES = ["http", "smtp", "ftp_data", "domain_u", "private", "ftp", "telnet", "finger", "urp_i", "ecr_i"]
SCAN_SERVICES = [
    "private", "other", "http", "ftp", "telnet", "smtp", "finger", "domain", "imap4", "pop_3",
    "sunrpc", "uucp", "whois", "ldap", "netbios_ns", "bgp", "courier", "csnet_ns", "ctf", "daytime",
]


def _rate(rng, centre, spread=0.08):
    return float(np.clip(rng.normal(centre, spread), 0.0, 1.0))


# share of rows drawn from the other class's template; caps linear accuracy
MIMIC_SHARE = 0.06
NOISY_NORMAL_SHARE = 0.02


def _row(rng: np.random.Generator, label: str) -> dict:
    f = {c: 0 for c in COLUMNS}
    f.update(protocol_type="tcp", service="http", flag="SF")
    if label == "normal" and rng.random() < NOISY_NORMAL_SHARE:
        label = "satan"
    elif label != "normal" and rng.random() < MIMIC_SHARE:
        label = "normal"
    if label == "normal":
        svc = NORMAL_SERVICES[min(int(rng.exponential(1.6)), len(NORMAL_SERVICES) - 1)]
        proto = {"domain_u": "udp", "private": "udp", "urp_i": "icmp", "ecr_i": "icmp"}.get(svc, "tcp")
        f.update(protocol_type=proto, service=svc, flag="SF" if rng.random() > 0.03 else "REJ")
        f["duration"] = int(rng.exponential(30)) if rng.random() < 0.1 else 0
        f["src_bytes"] = int(rng.lognormal(5.5, 1.2))
        f["dst_bytes"] = int(rng.lognormal(7.0, 1.8)) if proto == "tcp" else 0
        f["logged_in"] = int(proto == "tcp" and rng.random() < 0.85)
        f["hot"] = int(rng.random() < 0.05)
        f["count"] = int(rng.integers(1, 30))
        f["srv_count"] = int(rng.integers(1, 40))
        f["serror_rate"] = f["srv_serror_rate"] = _rate(rng, 0.02, 0.05)
        f["rerror_rate"] = f["srv_rerror_rate"] = _rate(rng, 0.03, 0.08)
        f["same_srv_rate"] = _rate(rng, 0.95, 0.12)
        f["diff_srv_rate"] = _rate(rng, 0.04, 0.08)
        f["srv_diff_host_rate"] = _rate(rng, 0.1, 0.15)
        f["dst_host_count"] = int(rng.integers(1, 256))
        f["dst_host_srv_count"] = int(rng.integers(50, 256))
        f["dst_host_same_srv_rate"] = _rate(rng, 0.8, 0.25)
        f["dst_host_diff_srv_rate"] = _rate(rng, 0.05, 0.08)
        f["dst_host_same_src_port_rate"] = _rate(rng, 0.1, 0.2)
        f["dst_host_srv_diff_host_rate"] = _rate(rng, 0.03, 0.05)
        f["dst_host_serror_rate"] = f["dst_host_srv_serror_rate"] = _rate(rng, 0.02, 0.05)
        f["dst_host_rerror_rate"] = f["dst_host_srv_rerror_rate"] = _rate(rng, 0.04, 0.1)
        return f
    stealthy = rng.random() < 0.12  # attacks that look like ordinary sessions
    if label in ("neptune", "portsweep", "satan", "nmap"):
        f["service"] = SCAN_SERVICES[int(rng.integers(len(SCAN_SERVICES)))]
        f["flag"] = {"neptune": "S0", "portsweep": "RSTR", "satan": "REJ", "nmap": "SH"}[label]
        f["count"] = int(rng.integers(80, 512)) if not stealthy else int(rng.integers(1, 40))
        f["srv_count"] = int(rng.integers(1, 30))
        if label == "neptune":
            f["serror_rate"] = f["srv_serror_rate"] = _rate(rng, 0.95)
            f["dst_host_serror_rate"] = f["dst_host_srv_serror_rate"] = _rate(rng, 0.95)
        else:
            f["rerror_rate"] = f["srv_rerror_rate"] = _rate(rng, 0.8, 0.2)
            f["dst_host_rerror_rate"] = f["dst_host_srv_rerror_rate"] = _rate(rng, 0.7, 0.25)
        f["same_srv_rate"] = _rate(rng, 0.08, 0.1)
        f["diff_srv_rate"] = _rate(rng, 0.07 if label == "neptune" else 0.6, 0.15)
        f["dst_host_count"] = 255
        f["dst_host_srv_count"] = int(rng.integers(1, 30))
        f["dst_host_same_srv_rate"] = _rate(rng, 0.08, 0.1)
        f["dst_host_diff_srv_rate"] = _rate(rng, 0.1 if label == "neptune" else 0.5, 0.15)
    elif label in ("smurf", "ipsweep"):
        f.update(protocol_type="icmp", service="ecr_i" if label == "smurf" else "eco_i")
        f["src_bytes"] = int(rng.choice([520, 1032])) if label == "smurf" else 8
        f["count"] = 511 if label == "smurf" and not stealthy else int(rng.integers(1, 20))
        f["srv_count"] = f["count"]
        f["same_srv_rate"] = 1.0
        f["dst_host_count"] = 255
        f["dst_host_srv_count"] = int(rng.integers(1, 256))
        f["dst_host_same_src_port_rate"] = _rate(rng, 0.9, 0.15)
        f["dst_host_srv_diff_host_rate"] = _rate(rng, 0.5 if label == "ipsweep" else 0.0, 0.2)
    elif label == "teardrop":
        f.update(protocol_type="udp", service="private")
        f["wrong_fragment"] = 3
        f["src_bytes"] = 28
        f["count"] = int(rng.integers(1, 100))
        f["srv_count"] = f["count"]
        f["same_srv_rate"] = 1.0
        f["dst_host_count"] = int(rng.integers(1, 256))
        f["dst_host_srv_count"] = int(rng.integers(1, 60))
    else:  # content attacks: back, warezclient, guess_passwd
        f["service"] = {"back": "http", "warezclient": "ftp_data", "guess_passwd": "telnet"}[label]
        f["src_bytes"] = int(rng.lognormal(10.0 if label == "back" else 8.0, 0.5))
        f["dst_bytes"] = int(rng.lognormal(8.0, 1.0))
        f["hot"] = int(rng.integers(1, 4))
        f["logged_in"] = int(label != "guess_passwd")
        f["num_failed_logins"] = int(label == "guess_passwd")
        f["is_guest_login"] = int(label == "warezclient")
        f["duration"] = int(rng.exponential(200)) if label == "warezclient" else 0
        f["count"] = int(rng.integers(1, 20))
        f["srv_count"] = int(rng.integers(1, 20))
        f["same_srv_rate"] = 1.0
        f["dst_host_count"] = int(rng.integers(1, 256))
        f["dst_host_srv_count"] = int(rng.integers(1, 256))
        f["dst_host_same_srv_rate"] = _rate(rng, 0.6, 0.3)
        f["dst_host_same_src_port_rate"] = _rate(rng, 0.3, 0.3)
    if stealthy:
        # blend the rate features towards normal-looking values
        for c in ("serror_rate", "srv_serror_rate", "rerror_rate", "srv_rerror_rate",
                  "dst_host_serror_rate", "dst_host_srv_serror_rate"):
            f[c] = _rate(rng, 0.1, 0.1)
        f["same_srv_rate"] = _rate(rng, 0.85, 0.15)
        f["flag"] = "SF"
        f["logged_in"] = 1
        f["service"] = NORMAL_SERVICES[int(rng.integers(4))]
        f["count"] = int(rng.integers(1, 40))
        f["dst_host_same_srv_rate"] = _rate(rng, 0.6, 0.3)
        f["diff_srv_rate"] = _rate(rng, 0.06, 0.08)
    return f


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def generate_rows(n: int, seed: int = 0, attack_share: float | None = None) -> list[list[str]]:
    """Return ``n`` rows of 43 string fields (41 features, label, difficulty)."""
    rng = np.random.default_rng(seed)
    labels = list(LABEL_MIX)
    p = np.array([LABEL_MIX[k] for k in labels])
    if attack_share is not None:
        p[1:] *= attack_share / p[1:].sum()
        p[0] = 1.0 - attack_share
    p = p / p.sum()
    picks = rng.choice(len(labels), size=n, p=p)
    rows = []
    for k in picks:
        label = labels[k]
        f = _row(rng, label)
        rows.append([_fmt(f[c]) for c in COLUMNS] + [label, str(int(rng.integers(5, 22)))])
    return rows


def generate_records(n: int, seed: int = 0, attack_share: float | None = None) -> list[RawRecord]:
    return [RawRecord(tuple(r[:41]), r[41], int(r[42])) for r in generate_rows(n, seed, attack_share)]


def write_nslkdd(path, n: int, seed: int = 0, attack_share: float | None = None) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for row in generate_rows(n, seed, attack_share):
            fh.write(",".join(row) + "\n")
    return path
