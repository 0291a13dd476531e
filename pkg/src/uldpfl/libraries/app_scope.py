from pathlib import Path
from typing import List


class ResourceManager:
    """
    Files shipped in the package's resources folder.
    Resolved relative to this file so it works from a checkout and when installed.
    """
    def __init__(self, asset_folder: str):
        self.asset_dir = self._get_resource_path() / asset_folder
        self.asset_dir.mkdir(parents=True, exist_ok=True)

    def list(self, suffix: str = '') -> List[str]:
        return sorted(p.name for p in self.asset_dir.iterdir() if p.name.endswith(suffix))

    def exists(self, asset_name: str) -> bool:
        return (self.asset_dir / asset_name).is_file()

    def path(self, asset_name: str) -> Path:
        return self.asset_dir / asset_name

    def get(self, asset_name: str) -> str:
        with open(self.asset_dir / asset_name, 'r') as f:
            return f.read()

    def update(self, asset_name: str, content: str):
        with open(self.asset_dir / asset_name, 'w') as f:
            f.write(content)

    def create(self, asset_name: str, content: str):
        if self.exists(asset_name):
            raise FileExistsError(f"File {asset_name} already exists")
        with open(self.asset_dir / asset_name, 'w') as f:
            f.write(content)

    def delete(self, asset_name: str):
        (self.asset_dir / asset_name).unlink()

    def _get_resource_path(self) -> Path:
        return Path(__file__).parent.parent / "resources"
