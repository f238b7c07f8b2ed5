# app/utils/file_handler.py

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from app.schemas import FORMAT_VERSION
from app.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


def ensure_directory_exists(path: PathLike) -> Path:
    """确保目录存在，如果不存在则创建"""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_text_atomic(text: str, file_path: PathLike) -> Path:
    """原子写入文本文件: 先写临时文件再替换"""
    target = Path(file_path)
    ensure_directory_exists(target.parent if str(target.parent) else '.')
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent or '.'))
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    logger.debug(f"写入文件: {target}")
    return target


def dumps_json(data: Any) -> str:
    """确定性的 JSON 文本 (键排序，浮点数使用最短往返表示)"""
    return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False) + '\n'


def save_json_file(data: Any, file_path: PathLike) -> Path:
    """保存JSON文件"""
    return write_text_atomic(dumps_json(data), file_path)


def load_json_file(file_path: PathLike) -> Any:
    """加载JSON文件"""
    with open(file_path, 'r', encoding='utf-8') as f:
        return json.load(f)


def format_csv_value(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_csv_file(rows: Iterable[Sequence[Any]], header: Sequence[str], file_path: PathLike) -> Path:
    """保存CSV文件，浮点数使用 repr 以保证可复现"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_csv_value(v) for v in row])
    return write_text_atomic(buffer.getvalue(), file_path)


def load_csv_file(file_path: PathLike) -> List[Dict[str, str]]:
    with open(file_path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


def get_file_hash(file_path: PathLike) -> str:
    """计算文件的SHA-256哈希值"""
    digest = hashlib.sha256()
    with open(file_path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _strip_volatile(data: Any, volatile: Sequence[str]) -> Any:
    if isinstance(data, dict):
        return {k: _strip_volatile(v, volatile) for k, v in data.items() if k not in volatile}
    if isinstance(data, list):
        return [_strip_volatile(v, volatile) for v in data]
    return data


def get_stable_hash(file_path: PathLike, volatile: Sequence[str] = ()) -> str:
    """
    计算去除易变字段 (如耗时) 后的内容哈希

    JSON 去掉同名键，CSV 去掉同名列；其余文件等同于 get_file_hash。
    """
    path = Path(file_path)
    if not volatile:
        return get_file_hash(path)
    if path.suffix == '.json':
        canonical = dumps_json(_strip_volatile(load_json_file(path), volatile))
    elif path.suffix == '.csv':
        rows = load_csv_file(path)
        buffer = io.StringIO()
        if rows:
            keep = [k for k in rows[0].keys() if k not in volatile]
            writer = csv.writer(buffer, lineterminator='\n')
            writer.writerow(keep)
            for row in rows:
                writer.writerow([row[k] for k in keep])
        canonical = buffer.getvalue()
    else:
        return get_file_hash(path)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def write_manifest(output_dir: PathLike, files: Sequence[PathLike],
                   volatile: Optional[Dict[str, Sequence[str]]] = None,
                   command: Optional[str] = None) -> Path:
    """
    写入产物清单 manifest.json

    每个文件记录 sha256 (原始字节) 与 content_sha256 (去除易变字段后的内容)。
    """
    output_dir = Path(output_dir)
    volatile = volatile or {}
    entries = []
    for file_path in sorted(Path(f) for f in files):
        rel = os.path.relpath(file_path, output_dir)
        fields = list(volatile.get(file_path.name, ()))
        entries.append({
            'file': rel.replace(os.sep, '/'),
            'sha256': get_file_hash(file_path),
            'content_sha256': get_stable_hash(file_path, fields),
            'volatile_fields': fields,
        })
    manifest = {'format_version': FORMAT_VERSION, 'command': command, 'files': entries}
    path = save_json_file(manifest, output_dir / 'manifest.json')
    logger.info(f"产物清单已写入: {path} ({len(entries)} 个文件)")
    return path
