class PipelineStatus:
    STATUS_GENERATE = "Generate"
    STATUS_TRAIN = "Train"
    STATUS_CHECKPOINT = "Checkpoint"
    STATUS_EXTRACT = "Extract"
    STATUS_REFINE = "Refine"
    STATUS_EVALUATE = "Evaluate"
    STATUS_EXPORT = "Export"


TIME_UNITS = (("d", 86400), ("h", 3600), ("m", 60), ("s", 1))


def get_readable_time(seconds, full_time=False):
    """Compact duration: the largest unit only, or every non-zero unit."""
    if seconds < 1:
        return f"{seconds * 1000:.0f}ms"
    parts = []
    remaining = int(seconds)
    for unit, size in TIME_UNITS:
        count, remaining = divmod(remaining, size)
        if count:
            parts.append(f"{count}{unit}")
            if not full_time:
                break
    return " ".join(parts)


def get_progress_bar_string(done, total):
    pct = 0 if total == 0 else min(max(done / total, 0), 1) * 100
    p = int(pct // 8)
    return f"[{'■' * p}{'□' * (12 - p)}] {pct:.1f}%"


def format_loss(report):
    return (
        f"total {report.total:.4f} | data {report.data:.4f} mm"
        f" | eikonal {report.eikonal:.5f}"
    )
