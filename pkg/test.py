from src.uldpfl.tests import (
    AccountingTestCase,
    AllocationTestCase,
    ApiTestCase,
    CliTestCase,
    CryptoTestCase,
    EnvTestCase,
    ExperimentTestCase,
    FLCoreTestCase,
    ModelTestCase,
    ProtocolTestCase,
)
import unittest

if __name__ == '__main__':
    unittest.main()
