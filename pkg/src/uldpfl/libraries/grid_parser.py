import re
from typing import List

from .errors import DomainError

MAX_ORDERS_ALLOWED = 100000


def default_order_grid() -> List[float]:
    """
    {1 + x/10 : x = 1..99} united with the integers 2..512, sorted and de-duplicated.
    """
    fractional = [round(1 + x / 10, 10) for x in range(1, 100)]
    integers = [float(a) for a in range(2, 513)]
    return sorted(set(fractional) | set(integers))


def parse_order_grid(grid_input: str) -> List[float]:
    """
    Parse an order grid override.

    Accepted entries, comma separated:
        2.5           single order
        2-64          integer range (inclusive)
        1.1-10.9:0.1  stepped range (inclusive)
    """
    entries = [entry.strip() for entry in grid_input.split(',') if entry.strip()]
    if not entries:
        raise DomainError('grid', grid_input, 'at least one order')
    orders = set()

    for entry in entries:
        if ':' in entry:
            orders.update(parse_stepped_range(entry))
        elif re.fullmatch(r'\d+(\.\d+)?\s*-\s*\d+(\.\d+)?', entry):
            orders.update(parse_range(entry))
        else:
            orders.add(float(entry))
        if len(orders) > MAX_ORDERS_ALLOWED:
            raise DomainError('grid', grid_input, f'at most {MAX_ORDERS_ALLOWED} orders')

    bad = [a for a in orders if a <= 1]
    if bad:
        raise DomainError('alpha', min(bad), 'every order > 1')
    return sorted(orders)


def parse_range(entry: str) -> List[float]:
    start, end = (float(part) for part in entry.split('-'))
    if end < start:
        raise DomainError('grid', entry, 'range end >= range start')
    return [float(a) for a in range(int(start), int(end) + 1) if a >= start]


def parse_stepped_range(entry: str) -> List[float]:
    bounds, step = entry.split(':')
    start, end = (float(part) for part in bounds.split('-'))
    step = float(step)
    if step <= 0 or end < start:
        raise DomainError('grid', entry, 'positive step and end >= start')
    count = int(round((end - start) / step))
    return [round(start + i * step, 10) for i in range(count + 1)]


def parse_int_list(list_input: str) -> List[int]:
    """
    Parse "1,2,4-8" style lists of positive integers (group sizes, user counts).
    """
    values = []
    for entry in (e.strip() for e in list_input.split(',')):
        if not entry:
            continue
        if '-' in entry:
            start, end = (int(part) for part in entry.split('-'))
            values.extend(range(start, end + 1))
        else:
            values.append(int(entry))
        if len(values) > MAX_ORDERS_ALLOWED:
            raise DomainError('list', list_input, f'at most {MAX_ORDERS_ALLOWED} values')
    if not values or min(values) < 1:
        raise DomainError('list', list_input, 'positive integers')
    return values
