"""
让 test_*.py 既能被 pytest 收集，也能直接 `python3 test_xxx.py` 运行并打印汇总。
直接运行时只支持 tmp_path 这一个 fixture。
"""
import inspect
import tempfile
import traceback
from pathlib import Path
from typing import Dict


def run_tests(namespace: Dict, title: str) -> int:
    tests = [(name, fn) for name, fn in namespace.items() if name.startswith("test_") and callable(fn)]

    print("\n" + "=" * 60)
    print(f"开始测试: {title}")
    print("=" * 60)

    results = {}
    for name, fn in tests:
        try:
            with tempfile.TemporaryDirectory() as tmp:
                kwargs = {"tmp_path": Path(tmp)} if "tmp_path" in inspect.signature(fn).parameters else {}
                fn(**kwargs)
            results[name] = True
        except Exception:
            print(f"❌ {name} 失败")
            traceback.print_exc()
            results[name] = False

    print("\n" + "=" * 60)
    print("测试结果汇总")
    print("=" * 60)
    for name, success in results.items():
        status = "✓ 成功" if success else "✗ 失败"
        print(f"{name:55s}: {status}")
    print("=" * 60)
    return 0 if all(results.values()) else 1
