//! Builds a target assignment for two ground-truth boxes, evaluates the loss
//! on a slightly wrong prediction and takes a few gradient descent steps on
//! the decoded outputs.

use yolite::detect::{AnchorSet, BBox};
use yolite::loss::{assign_targets, ciou_loss, total_loss, Predictions, DEFAULT_LAMBDA_NOOBJ};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (grid, classes, input) = (4, 3, 128);
    let anchors = AnchorSet::default().fine;
    let truths = [(BBox::new(20.0, 30.0, 24.0, 30.0), 1), (BBox::new(100.0, 90.0, 60.0, 50.0), 2)];
    let t = assign_targets(&truths, grid, &anchors, input, classes, DEFAULT_LAMBDA_NOOBJ)?;

    let slots = grid * grid * anchors.len();
    let mut p = Predictions {
        grid,
        boxes_per_cell: anchors.len(),
        classes,
        conf: vec![0.3; slots],
        class_probs: vec![0.4; slots * classes],
        boxes: (0..slots).map(|_| BBox::new(64.0, 64.0, 40.0, 40.0)).collect(),
    };

    let lr = 0.05;
    for step in 0..=40 {
        let l = total_loss(&p, &t)?;
        if step % 10 == 0 {
            println!(
                "step {step:>2}: total {:.4}  conf {:.4}  class {:.4}  box {:.4}",
                l.total, l.confidence, l.class, l.box_regression
            );
        }
        for (v, g) in p.conf.iter_mut().zip(&l.grad_conf) {
            *v = (*v - lr * g).clamp(1e-4, 1.0 - 1e-4);
        }
        for (v, g) in p.class_probs.iter_mut().zip(&l.grad_class) {
            *v = (*v - lr * g).clamp(1e-4, 1.0 - 1e-4);
        }
        for (b, g) in p.boxes.iter_mut().zip(&l.grad_box) {
            let s = 2000.0 * lr;
            *b = BBox::new(b.cx - s * g[0], b.cy - s * g[1], (b.w - s * g[2]).max(1.0), (b.h - s * g[3]).max(1.0));
        }
    }

    let (l, g) = ciou_loss(&BBox::new(22.0, 28.0, 20.0, 34.0), &truths[0].0)?;
    println!("CIoU of a near miss: {l:.4}, gradient {g:.4?}");
    Ok(())
}
