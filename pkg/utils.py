# utils.py
# 通用工具函数：十六进制 / base64 编解码、确定性 JSON 输出

import base64
import json
import os


def to_hex(data: bytes) -> str:
    """字节转小写十六进制（无前缀）"""
    return data.hex()


def from_hex(text):
    """十六进制转字节；格式不对返回 None（长度由 schema 校验负责）"""
    if not isinstance(text, str):
        return None
    try:
        return bytes.fromhex(text)
    except ValueError:
        return None


def to_b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def from_b64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def dump_json(obj) -> str:
    """确定性 JSON：键排序、固定缩进，同一对象永远得到同样的字节"""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def dump_jsonl(rows) -> str:
    """JSON Lines，每行一个紧凑对象"""
    return "".join(
        json.dumps(row, sort_keys=True, separators=(",", ":"),
                   ensure_ascii=False) + "\n"
        for row in rows
    )


def write_text(path: str, text: str):
    """写文件（自动创建目录）"""
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
