"""
Worked Example Test Suite
=========================

The example jobs under configs/: vertex families of the built-in plants and
the DC motor LQG and H-inf runs written to a scratch directory.
"""

import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

import gdbal
from error_handler import EXIT_OK
from job_config import load_job_config_file

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
PI_REFERENCE = [1.78, 0.400, 0.192]


def shipped(name: str, out: Path):
    return load_job_config_file(CONFIG_DIR / f"{name}.json").with_overrides(output_dir=str(out))


class TestVertexFamilies(unittest.TestCase):
    """Jacobian polytopes of the built-in plants"""

    def setUp(self):
        """Set up a scratch directory"""
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        """Remove the scratch directory"""
        shutil.rmtree(self.temp_dir)

    def test_dc_motor(self):
        """Test the two sound vertices spanned by cos(x1) in [-1, 1]"""
        job = gdbal.Job(shipped("dc_motor_lqg", self.temp_dir))
        vertices = job.vertices
        self.assertTrue(vertices.sound)
        self.assertEqual(len(vertices), 2)
        A0 = np.array([[0.0, 1.0, 0.0], [0.0, -2.0, 1.0], [0.0, -5.0, -5.0]])
        np.testing.assert_allclose(sum(vertices.vertices) / 2, A0, atol=1e-12)
        np.testing.assert_allclose(np.abs(vertices.vertices[0] - A0)[1, 0], 1.0)

    def test_network_chain(self):
        """Test the endpoint family of the 20-node chain"""
        job = gdbal.Job(shipped("network_chain", self.temp_dir))
        vertices = job.vertices
        self.assertEqual(job.plant.n, 20)
        self.assertFalse(vertices.sound)
        self.assertEqual(len(vertices) % 2, 1)
        np.testing.assert_allclose(vertices.vertices[0], -3.0 * np.eye(20), atol=1e-12)
        for A in vertices.vertices:
            self.assertLess(np.max(np.linalg.eigvals(A).real), 0.0)


class TestDcMotorRuns(unittest.TestCase):
    """LQG and H-inf commands on the DC motor jobs"""

    def setUp(self):
        """Set up a scratch directory"""
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        """Remove the scratch directory"""
        shutil.rmtree(self.temp_dir)

    def test_lqg(self):
        """Test the LQG run with its second-order controller"""
        self.assertEqual(gdbal.run("lqg", shipped("dc_motor_lqg", self.temp_dir)), EXIT_OK)
        report = json.loads((self.temp_dir / "report.json").read_text())
        self.assertIn("controller_r2_A.csv", report["files"])
        self.assertIn("pi.csv", report["files"])

    def test_hinf_design(self):
        """Test pi, the selected order and the reduced controllers from the supplied matrices"""
        design = gdbal.Job(shipped("dc_motor_hinf", self.temp_dir)).hinf()
        for value, reference in zip(design.cert.pi, PI_REFERENCE):
            self.assertAlmostEqual(value / reference, 1.0, delta=0.01)
        self.assertFalse(design.cert.spectral_ok)
        self.assertEqual((design.order, design.order_found), (2, True))
        self.assertEqual(sorted(design.reduced), [1, 2])
        self.assertIsNotNone(design.reduced[2][1].gain_bound)
        self.assertIsNone(design.reduced[1][1].gain_bound)

    def test_printed_matrices_meet_inequalities(self):
        """Test the supplied P_inf and Q_inf at both vertices within the printing precision"""
        cert = gdbal.Job(shipped("dc_motor_hinf", self.temp_dir)).hinf().cert
        self.assertEqual(len(cert.vertices), 2)
        for label, value in cert.report.violations.items():
            if label.startswith(("control[", "filter[")):
                with self.subTest(constraint=label):
                    self.assertLessEqual(value, 5e-2)

    def test_hinf_report(self):
        """Test the H-inf report files and the spectral warning"""
        self.assertEqual(gdbal.run("hinf", shipped("dc_motor_hinf", self.temp_dir)), EXIT_OK)
        report = json.loads((self.temp_dir / "report.json").read_text())
        for name in ("P_inf.csv", "R_inf.csv", "Q_inf.csv", "pi.csv", "controller_r1_K.csv", "controller_r2_K.csv"):
            self.assertIn(name, report["files"])
        self.assertIn("UNMET", (self.temp_dir / "report.txt").read_text())


def run_replication_tests() -> bool:
    suite = unittest.TestSuite()
    for test_class in [TestVertexFamilies, TestDcMotorRuns]:
        suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    return unittest.TextTestRunner(verbosity=2).run(suite).wasSuccessful()


if __name__ == "__main__":
    unittest.main(verbosity=2)
