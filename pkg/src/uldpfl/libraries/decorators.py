import threading
from time import perf_counter
from functools import wraps
from dataclasses import dataclass, field
from typing import DefaultDict
from collections import defaultdict
from tabulate import tabulate


@dataclass
class JobStats:
    running: DefaultDict[str, int] = field(default_factory=lambda: defaultdict(int))
    finished: DefaultDict[str, int] = field(default_factory=lambda: defaultdict(int))
    timing: DefaultDict[str, float] = field(default_factory=lambda: defaultdict(float))
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __str__(self):
        data = [
            [name, self.running.get(name, 0), self.finished.get(name, 0), self.timing.get(name, 0.0)]
            for name in sorted(set(self.running) | set(self.finished))
        ]

        headers = ["Function", "Running", "Finished", "Avg Time (s)"]
        return tabulate(data, headers=headers, tablefmt="grid")

    def record(self, name: str, elapsed: float):
        with self.lock:
            self.running[name] -= 1
            self.finished[name] += 1

            # running average
            self.timing[name] = round(
                ((self.finished[name] - 1) * self.timing[name] + elapsed) / self.finished[name], 6
            )

            if self.running[name] == 0:
                self.running.pop(name)

    def start(self, name: str):
        with self.lock:
            self.running[name] += 1


def job_tracker(func=None, *, name: str = None):
    """
    Track how often and how long a method runs on its instance's job_stats.
    Usable bare (@job_tracker) or with an explicit name (@job_tracker(name='train')).
    """
    def decorate(fn):
        fxn = name or fn.__name__

        @wraps(fn)
        def wrapper(*args, **kwargs):
            class_instance = args[0]
            job_stats = init_job_tracker(class_instance)

            job_stats.start(fxn)
            start = perf_counter()
            try:
                return fn(*args, **kwargs)
            finally:
                job_stats.record(fxn, perf_counter() - start)

        return wrapper

    def init_job_tracker(class_instance):
        if not hasattr(class_instance, 'job_stats'):
            class_instance.job_stats = JobStats()
        return class_instance.job_stats

    if func is not None:
        return decorate(func)
    return decorate


def terminator(func):
    """
    Skip the wrapped step once the owning runner has been stopped,
    which lets a running experiment wind down between rounds.
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        runner = args[0]  # aka self
        if not runner.running:
            return None
        return func(*args, **kwargs)

    return wrapper
